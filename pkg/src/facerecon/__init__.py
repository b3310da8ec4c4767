"""Dense facial reconstruction from sparse marker tracks by local geometric indexing."""
