"""rlogist: fast observation strategy over two-level tiled feature pyramids.

Subpackages:
    numkernel   tiny reverse-mode autodiff core + Adam
    slidegen    synthetic slide bundle generation and the bundle file format
    envmdp      the masked-action observation MDP
    nets        policy / value / classifier / feature updaters + pretraining
    rltrain     PPO and REINFORCE training pipelines
    evalharness strategy evaluation, ablations, path traces
    cli         command-line entry point
"""

__version__ = "0.1.0"
