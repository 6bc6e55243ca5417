"""Jinja2 rendering of the HTML run summary"""
from __future__ import annotations

import logging
import math
from typing import TYPE_CHECKING, Any

from jinja2 import BaseLoader, StrictUndefined
from jinja2.sandbox import SandboxedEnvironment

if TYPE_CHECKING:
    from .config import ExperimentConfig
    from .pipeline import RunResult

logger = logging.getLogger(__name__)

TOP_FEATURES = 20

RUN_TEMPLATE = """<!doctype html>
<html>
<head><meta charset="utf-8"><title>{{ title }}</title></head>
<body>
<h1>{{ title }}</h1>
<p>Run kind: {{ run.kind }} &middot; fingerprint <code>{{ run.fingerprint }}</code></p>
{% if run.top_channel %}<p>Top channel by gain importance: <b>{{ run.top_channel }}</b></p>{% endif %}
<h2>PR-AUC</h2>
<table>
<tr><th>model</th><th>features</th><th>validation</th><th>test</th><th>train seconds</th></tr>
{% for r in results %}<tr><td>{{ r.model }}</td><td>{{ r.n_features }}</td><td>{{ r.val }}</td><td>{{ r.test }}</td><td>{{ r.seconds }}</td></tr>
{% endfor %}</table>
{% if lookback %}<h2>Lookback study</h2>
<table>
<tr><th>family</th>{% for L in lookback.lookbacks %}<th>L={{ L }}</th>{% endfor %}</tr>
{% for family, row in lookback.rows.items() %}<tr><td>{{ family }}</td>{% for value in row %}<td>{{ value }}</td>{% endfor %}</tr>
{% endfor %}</table>{% endif %}
{% if importance %}<h2>Top {{ importance|length }} features by gain</h2>
<table>
<tr><th>feature</th><th>gain</th></tr>
{% for name, gain in importance %}<tr><td>{{ name }}</td><td>{{ gain }}</td></tr>
{% endfor %}</table>{% endif %}
<h2>Configuration</h2>
<pre>{{ config_text }}</pre>
</body>
</html>
"""


class StringLoader(BaseLoader):
    def __init__(self, template_content: str):
        self.template_content = template_content

    def get_source(self, environment, template):
        return self.template_content, None, lambda: True


def _fmt(value: float, digits: int = 5) -> str:
    return "n/a" if value is None or math.isnan(value) else f"{value:.{digits}f}"


def render(content: str, fields: dict[str, Any]) -> str:
    env = SandboxedEnvironment(loader=StringLoader(content), autoescape=True, undefined=StrictUndefined)
    try:
        return env.get_template("").render(**fields)
    except Exception as e:
        logger.error(f"Template rendering failed: {e}")
        logger.error(f"Field count: {len(fields)}")
        raise


def render_report(run: RunResult, cfg: ExperimentConfig, title: str | None = None) -> str:
    results = [
        {
            "model": r.model,
            "n_features": r.n_features,
            "val": _fmt(r.val_pr_auc),
            "test": _fmt(r.test_pr_auc),
            "seconds": _fmt(r.train_seconds, 1),
        }
        for r in run.results
    ]
    lookback = None
    with_lookback = [r for r in run.results if r.lookback is not None]
    if with_lookback:
        lookbacks = sorted({r.lookback for r in with_lookback})
        rows: dict[str, list[str]] = {}
        for r in with_lookback:
            rows.setdefault(r.family, ["n/a"] * len(lookbacks))[lookbacks.index(r.lookback)] = _fmt(r.test_pr_auc)
        lookback = {"lookbacks": lookbacks, "rows": rows}
    ranked = sorted(run.importance.items(), key=lambda kv: (-kv[1], kv[0]))[:TOP_FEATURES]
    return render(
        RUN_TEMPLATE,
        {
            "title": title or f"Hypoxcast {run.kind} run",
            "run": run,
            "results": results,
            "lookback": lookback,
            "importance": [(name, _fmt(gain, 3)) for name, gain in ranked],
            "config_text": cfg.to_text(),
        },
    )
