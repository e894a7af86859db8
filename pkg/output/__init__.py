# CycleUV Output Module
