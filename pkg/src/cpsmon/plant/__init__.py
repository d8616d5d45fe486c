"""Simulated plant: sensors, UART buses, crossbar, CPU and memory."""
