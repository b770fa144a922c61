"""seralign: desk-scale speech emotion recognition with frame-level
pseudo-label alignment.

Submodules (import what you need; the package root stays import-light so
the CLI can pin BLAS thread pools before numpy loads):

- corpus:     synthetic corpus generation, session folds, persistence
- autodiff:   reverse-mode differentiation over numpy arrays
- gradcheck:  central finite-difference gradient oracle
- optim:      decoupled-weight-decay Adam with linear warmup
- checkpoint: named-tensor checkpoint container
- encoder:    miniature masked-prediction transformer encoder
- cluster:    k-means codebooks and frame pseudo-labels
- pretrain:   masked-prediction loss and trainer
- finetune:   attention/average pooling and supervised trainers
- evaluate:   UA/WA metrics, fold aggregation, report rendering
- pipeline:   phase orchestration, provenance, ablation grid
- cli:        seralign command-line interface
"""

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "checkpoint",
    "cli",
    "cluster",
    "corpus",
    "encoder",
    "errors",
    "evaluate",
    "finetune",
    "gradcheck",
    "optim",
    "pipeline",
    "pretrain",
]
