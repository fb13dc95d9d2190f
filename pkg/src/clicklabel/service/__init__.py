"""HTTP annotation service wrapping the core package."""
