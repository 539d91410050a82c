# Schedules, attention control, flow fusion and metrics
