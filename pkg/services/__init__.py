# Pipeline orchestration, face enhancement, configuration and run reports
