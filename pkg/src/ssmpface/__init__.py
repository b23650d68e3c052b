"""3-D face recognition with simultaneous sparse approximations on the sphere."""

__version__ = "0.1.0"
