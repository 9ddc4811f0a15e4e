"""
Tests package for the SeqComm workbench

This package contains unit tests for all modules.
"""
