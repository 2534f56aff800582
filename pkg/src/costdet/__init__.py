"""Cost-sensitive two-stage lesion detection on synthetic multi-channel slices.

Submodules:
    autodiff   reverse-mode automatic differentiation over float64 arrays
    syndata    deterministic synthetic slice generation and dataset I/O
    detector   anchor-based two-stage detector over handcrafted box features
    losses     cost-sensitive lesion- and slice-level loss terms
    trainer    SGD training loop with per-epoch validation
    evaluator  lesion- and slice-level metrics, threshold sweeps, reports
    cli        command-line interface (generate / train / evaluate / sweep / compare)
"""

__version__ = "0.1.0"
