# Test package initialization
# This file ensures that pytest can discover and run tests in this directory
