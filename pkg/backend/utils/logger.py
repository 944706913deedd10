"""
Fichier interne pour la gestion des logs et la normalisation des messages.
Les avertissements sortent en jaune, les erreurs en rouge et le debug en gris
(uniquement si la variable d'environnement REWEIGH_DEBUG est définie).
"""

from colorama import init, Fore, Style
import logging
import os
import unicodedata

# Initialiser colorama pour qu'il fonctionne correctement sur tous les OS
init(autoreset=True)

DEBUG_ENV_VAR = "REWEIGH_DEBUG"


def normalize_text(text):
    """Remplace les caractères accentués par leurs équivalents sans accent.

    Les messages des expériences sont écrits en français : on les ramène en
    ASCII pour les consoles et fichiers de log qui ne gèrent pas l'UTF-8.
    """
    if not isinstance(text, str):
        text = str(text)

    # Décompose les caractères accentués puis supprime les marques d'accentuation
    text = unicodedata.normalize('NFKD', text)
    text = ''.join(c for c in text if not unicodedata.combining(c))

    # Ligatures qui ne se décomposent pas
    for special, plain in {'œ': 'oe', 'Œ': 'OE', 'æ': 'ae', 'Æ': 'AE', 'ø': 'o'}.items():
        text = text.replace(special, plain)

    text = text.encode('ASCII', 'ignore').decode('ASCII')

    # Suppression des caractères non imprimables
    return ''.join(c for c in text if c.isprintable() or c in ['\n', '\t', '\r'])


def debug_enabled():
    """Indique si les messages de debug doivent être affichés."""
    return os.environ.get(DEBUG_ENV_VAR, "").strip().lower() not in ("", "0", "false", "non")


def log_info(message):
    """Affiche un message d'information normal."""
    print(normalize_text(message))


def log_debug(message):
    """Affiche un message de debug en gris (uniquement si REWEIGH_DEBUG est active)."""
    if debug_enabled():
        print(f"{Fore.LIGHTBLACK_EX}{normalize_text(message)}{Style.RESET_ALL}")


def log_success(message):
    """Affiche un message de réussite en vert."""
    print(f"{Fore.GREEN}{normalize_text(message)}{Style.RESET_ALL}")


def log_warning(message):
    """Affiche un message d'avertissement en jaune."""
    print(f"{Fore.YELLOW}{normalize_text(message)}{Style.RESET_ALL}")


def log_error(message):
    """Affiche un message d'erreur en rouge."""
    print(f"{Fore.RED}{normalize_text(message)}{Style.RESET_ALL}")


class NormalizedFormatter(logging.Formatter):
    """Formateur qui normalise les caractères spéciaux dans les logs."""

    def format(self, record):
        record.msg = normalize_text(record.msg)
        return super().format(record)


def setup_logger(name=None, level=None):
    """Configure un logger qui normalise automatiquement les messages.

    Args:
        name: Nom optionnel du logger à configurer. Si None, configure le logger racine.
        level: Niveau de log. Par défaut DEBUG si REWEIGH_DEBUG est active, sinon INFO.

    Returns:
        Le logger configuré
    """
    logger = logging.getLogger(name)

    # Ne pas ajouter de gestionnaires si déjà configuré
    if not logger.handlers:
        handler = logging.StreamHandler()
        formatter = NormalizedFormatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    if level is None:
        level = logging.DEBUG if debug_enabled() else logging.INFO
    logger.setLevel(level)

    return logger
