"""Pydantic models for request/response"""
