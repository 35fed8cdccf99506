"""Prompt-able UNet with dense self-supervised pretraining and frozen-backbone
prompt adaptation."""

__version__ = "0.1.0"
