# Frame directory I/O and synthetic test clips
