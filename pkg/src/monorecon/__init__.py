"""Single-image 3D reconstruction."""
