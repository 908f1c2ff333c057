# Лаборатория затухания: CLI и раннер экспериментов
__version__ = "0.1.0"
