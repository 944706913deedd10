# Ce fichier permet d'importer facilement les fonctions de logging
from .logger import log_info, log_warning, log_error, log_debug, log_success, setup_logger
