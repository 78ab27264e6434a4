"""CETSP 求解工具包"""
