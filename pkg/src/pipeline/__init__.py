"""Stage orchestration, workdir layout and experiment reports."""
