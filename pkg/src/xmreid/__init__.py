"""Cross-modal (infrared/colour) person re-identification at desk scale.

Part-stripe feature extraction, entropy-weighted multi-layer domain
adversarial training, and CMC/mAP retrieval evaluation on a synthetic
two-modality dataset, built on a from-scratch float64 autodiff engine.
"""

__version__ = "0.1.0"
