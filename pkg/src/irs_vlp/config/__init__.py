"""Scenario configuration layer."""

from irs_vlp.config.scenario import Scenario, load_scenario, parse_config

__all__ = ["Scenario", "load_scenario", "parse_config"]
