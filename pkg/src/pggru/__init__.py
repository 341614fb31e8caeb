"""Physics-guided preview GRU feedforward control for a two-mass servo rig.

Modules
-------
lti        discrete-time LTI utilities (discretization, polynomials, filtering)
inversion  stable model-inverse feedforward (ZPETC, non-causal expansion)
sgfilter   Savitzky-Golay smoothing
gru        preview GRU model, initialization and artifacts
autodiff   reverse-mode tape
train      TBPTT training, ADAM, random search
plant      simulated rig, references, data sets, identification
config     experiment presets and overrides
pipeline   experiment stages
cli        command-line entry point
"""

__version__ = "0.1.0"
