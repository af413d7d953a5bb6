"""Small standalone applications launched through the executor."""
