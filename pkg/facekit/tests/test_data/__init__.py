# Test data package
