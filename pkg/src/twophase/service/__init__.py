"""HTTP service wrapping the design and simulation routines."""
