# Численное ядро: спектры, операторы, потоки, полугруппы, диагностика, реакция
