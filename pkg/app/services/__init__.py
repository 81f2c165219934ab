"""Service layer modules"""
