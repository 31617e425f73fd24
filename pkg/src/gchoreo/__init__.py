"""Group choreography toolkit: multi-dancer motion fitting, music-driven
group-dance generation, and motion quality metrics."""

__version__ = "0.1.0"
