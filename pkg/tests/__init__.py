"""Test suite for itnn-codec."""
