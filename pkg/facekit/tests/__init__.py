# Test package for facekit modules
