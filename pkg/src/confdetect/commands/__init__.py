"""confdetect command implementations."""
