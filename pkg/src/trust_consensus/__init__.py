"""Trust-and-confidence resilient consensus: simulator, bound analysis and CLI."""
