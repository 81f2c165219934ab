"""Asymptotic extraction, modified characteristics and verdicts"""
