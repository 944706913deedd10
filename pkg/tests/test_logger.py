import logging

from backend.utils.logger import DEBUG_ENV_VAR, log_debug, log_error, normalize_text, setup_logger


def test_normalize_text_strips_accents():
    assert normalize_text("Repondération échouée, cœur") == "Reponderation echouee, coeur"
    assert normalize_text(0.5) == "0.5"


def test_debug_messages_follow_environment(monkeypatch, capsys):
    monkeypatch.delenv(DEBUG_ENV_VAR, raising=False)
    log_debug("pas affiche")
    assert capsys.readouterr().out == ""
    monkeypatch.setenv(DEBUG_ENV_VAR, "1")
    log_debug("itération 3")
    assert "iteration 3" in capsys.readouterr().out
    log_error("échec")
    assert "echec" in capsys.readouterr().out


def test_setup_logger_level(monkeypatch):
    monkeypatch.setenv(DEBUG_ENV_VAR, "0")
    assert setup_logger("reweigh.test").level == logging.INFO
    monkeypatch.setenv(DEBUG_ENV_VAR, "oui")
    logger = setup_logger("reweigh.test")
    assert logger.level == logging.DEBUG and len(logger.handlers) == 1
