"""Physics records and pydantic schemas."""
