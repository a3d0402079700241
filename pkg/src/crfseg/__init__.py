"""crfseg: superpixel continuous-CRF segmentation with exact
linear-system layers, trained end-to-end by manual backpropagation."""

__version__ = "0.1.0"
