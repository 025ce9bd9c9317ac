"""
This package contains the domain modules: the autodiff engine, the corpus
pipeline, the HRED generator and discriminator, the objectives, training
and evaluation. Nothing in here knows about the command line.
"""
