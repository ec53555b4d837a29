"""Tests for display helpers."""

import logging

from rich.console import Console

from bruijn_share import display
from bruijn_share.display import configure_logging, format_number, format_size


class TestFormatNumber:
    def test_small(self):
        assert format_number(42) == "42"

    def test_thousands(self):
        assert format_number(1200) == "1,200"

    def test_tens_of_thousands(self):
        assert format_number(421543) == "421.5K"

    def test_millions(self):
        assert format_number(1234567) == "1.2M"


class TestFormatSize:
    def test_bytes(self):
        assert format_size(512) == "512 B"

    def test_kib(self):
        assert format_size(2048) == "2.0 KiB"

    def test_mib(self):
        assert format_size(5 * 1024 * 1024) == "5.0 MiB"


class TestLogging:
    def test_levels(self):
        configure_logging(0)
        assert logging.getLogger().level == logging.WARNING
        configure_logging(1)
        assert logging.getLogger().level == logging.INFO
        configure_logging(3)
        assert logging.getLogger().level == logging.DEBUG


class TestPrinters:
    def test_search_results_and_empty(self, monkeypatch):
        console = Console(record=True, width=160)
        monkeypatch.setattr(display, "console", console)
        display.print_search_results({"keywords": ["gossip", "zones"], "results": [
            {"fileHash": "a" * 40, "fileName": "notes.txt", "fileSize": 2048, "matched": ["gossip"],
             "holders": ["h1", "h2", "h3"]}]})
        display.print_search_results({"keywords": ["nothing"], "results": []})
        text = console.export_text()
        assert "notes.txt" in text
        assert "1/2" in text
        assert "No files matched" in text

    def test_thread(self, monkeypatch):
        console = Console(record=True, width=120)
        monkeypatch.setattr(display, "console", console)
        display.print_thread({"kind": "post", "title": "Root", "author": "alice", "id": "p1", "text": "body",
                              "replies": [{"kind": "comment", "author": "bob", "id": "c1", "text": "agreed",
                                           "replies": []}]})
        text = console.export_text()
        assert "Root" in text and "agreed" in text

    def test_histogram(self, monkeypatch):
        console = Console(record=True, width=120)
        monkeypatch.setattr(display, "console", console)
        display.print_degree_histogram({1: 2, 3: 10})
        assert "Out-degree distribution" in console.export_text()
