"""Design and analysis tools for emitters coupled to fiber Fabry-Perot microcavities."""

__version__ = "1.0.0"
