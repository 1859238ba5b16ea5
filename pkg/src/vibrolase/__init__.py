"""Few-emitter vibronic lasing simulator."""
