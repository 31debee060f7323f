"""Toy systems, file formats, configuration and the command line."""
