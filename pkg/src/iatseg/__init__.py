"""
iatseg
인스턴스 인식 transformer 기반 인스턴스 분할 (numpy 자동 미분)
"""

__version__ = "0.1.0"
