# Makes src a Python package