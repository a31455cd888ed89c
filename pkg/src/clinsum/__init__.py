"""Knowledge-infused multimodal clinical conversation summarization at desk scale."""

__version__ = "0.1.0"
