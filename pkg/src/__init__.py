# Package bestrq-mixers: benchmark dei token mixer e pre-training BEST-RQ desk-scale
# Questo file rende la directory un package Python per permettere import relativi
