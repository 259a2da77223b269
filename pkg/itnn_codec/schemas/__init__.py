"""JSON schema files for the records tap streams."""
