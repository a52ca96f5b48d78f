"""Training, evaluation and export harness for the prompt fuser."""
