"""
Services module initialization.

One module per domain area: cavity optics, the PDH front end, the servo
chain, noise models, the closed-loop simulator and measurement analysis.
"""
