"""Event-camera motion segmentation toolkit."""
