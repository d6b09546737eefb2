"""Test and operations harness: corpus generation, simulation, oracle."""

from .config import load_config, parse_config_text, parse_script, parse_topology
from .corpus import gen_corpus, load_manifest, write_corpus
from .oracle import oracle_eval, ref_eval, resultset_rows
from .sim import RealVO, SimVO, corpus_split, sim_run, transcript_text

__all__ = [
    "RealVO",
    "SimVO",
    "corpus_split",
    "gen_corpus",
    "load_config",
    "load_manifest",
    "oracle_eval",
    "parse_config_text",
    "parse_script",
    "parse_topology",
    "ref_eval",
    "resultset_rows",
    "sim_run",
    "transcript_text",
    "write_corpus",
]
