from __future__ import annotations

from typing import Any, Dict, Optional, Sequence

from services.storage import RunRecord


def _fmt(value: Any, digits: int = 6) -> str:
    if value is None:
        return "—"
    if isinstance(value, bool):
        return "да" if value else "нет"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return f"{value:.{digits}g}"
    return str(value)


def _status(record: RunRecord) -> str:
    if not record.passed:
        return "❌ проверки не пройдены"
    if record.sentinel:
        return "⏳ бюджет исчерпан (sentinel)"
    return "✅ проверки пройдены"


# =========================
#  Шапка прогона
# =========================
def render_header(record: RunRecord) -> str:
    return (
        f"Прогон `{record.kind}` · {record.name}\n"
        f"run_id: {record.run_id} · seed: {record.seed}\n"
        f"Статус: {_status(record)}\n"
        f"Время: {record.wall_time:.2f} c"
    )


def render_checks(checks: Dict[str, Dict[str, Any]]) -> str:
    if not checks:
        return ""
    lines = ["Проверки:"]
    for name in sorted(checks):
        c = checks[name]
        mark = "✅" if c.get("passed") else "❌"
        lines.append(f"  {mark} {name}: {_fmt(c.get('value'))}")
    return "\n".join(lines)


def render_artifacts(record: RunRecord) -> str:
    if not record.artifacts:
        return ""
    lines = ["Артефакты:"]
    for name in sorted(record.artifacts):
        lines.append(f"  • {name}: {record.artifacts[name]}")
    return "\n".join(lines)


# =========================
#  По видам прогонов
# =========================
def render_decay_curve(rows: Sequence[Sequence[Any]], delta: float) -> str:
    lines = [f"Кривая затухания (δ = {_fmt(delta)}):", "  A            τ_δ"]
    for A, tau, reached in rows:
        tau_text = _fmt(tau) if reached else "не достигнуто"
        lines.append(f"  {_fmt(A):<12} {tau_text}")
    return "\n".join(lines)


def render_spectrum(summary: Dict[str, Any]) -> str:
    lines = [
        f"Спектр {summary.get('operator')}: {summary.get('n_eigenpairs')} собственных пар, "
        f"{summary.get('n_groups')} групп",
        f"  внутри полосы: {summary.get('n_band_interior')}, «шероховатых»: {summary.get('n_rough')}, "
        f"первых интегралов: {summary.get('n_first_integrals')}",
    ]
    cert = summary.get("certificate")
    if cert:
        mark = "✅" if cert.get("passed") else "❌"
        lines.append(
            f"  {mark} сертификат: τ* = {_fmt(cert.get('tau_star'))}, "
            f"min ‖φ(τ*)‖ = {_fmt(cert.get('min_norm'))}"
        )
    return "\n".join(lines)


def render_rage(summary: Dict[str, Any]) -> str:
    lines = [f"Средние по времени (N_low = {summary.get('n_low')}):"]
    for row in summary.get("averages", []):
        lines.append(
            f"  T = {_fmt(row['T'])}: RAGE {_fmt(row['rage'])}, "
            f"H¹ {_fmt(row['h1_average'])} (предел {_fmt(row['h1_limit'])})"
        )
    return "\n".join(lines)


def render_nash(summary: Dict[str, Any]) -> str:
    fit = summary.get("fit") or {}
    return (
        f"Нэш: A = {_fmt(summary.get('amplitude'))}, показатель p = {_fmt(fit.get('power'), 4)}, "
        f"C = {_fmt(fit.get('constant'), 4)} на окне {fit.get('window')}"
    )


def render_quench(summary: Dict[str, Any]) -> str:
    verdict = summary.get("verdict") or {}
    if verdict.get("quenched"):
        head = f"🧊 погашено к t = {_fmt(verdict.get('t_quench'))}"
    else:
        head = f"🔥 горит до t = {_fmt(verdict.get('t_max'))}"
    lines = [f"Реакция при A = {_fmt(summary.get('amplitude'))}: {head}"]
    search = summary.get("critical")
    if search:
        if search.get("found"):
            lines.append(f"  первая гасящая амплитуда ≈ {_fmt(search.get('amplitude'))}")
        else:
            lines.append("  гасящая амплитуда не найдена в пределах A_max")
    return "\n".join(lines)


def render_flow(summary: Dict[str, Any]) -> str:
    lines = [
        f"Поле {summary.get('flow')}: K = {summary.get('K')}, ‖u‖_Lip ≈ {_fmt(summary.get('lipschitz'), 4)}",
        f"  ‖div u‖ = {_fmt(summary.get('divergence'))}",
    ]
    if "measure_defect" in summary:
        lines.append(f"  дефект меры det DZ − F: {_fmt(summary.get('measure_defect'))}")
    return "\n".join(lines)


def render_simulate(summary: Dict[str, Any]) -> str:
    lines = [
        f"Эволюция: ‖φ(T)‖ = {_fmt(summary.get('final_norm'))}, "
        f"невязка энергии {_fmt(summary.get('energy_residual'), 3)}"
    ]
    if summary.get("tau_delta") is not None or "reached" in summary:
        tau = summary.get("tau_delta")
        lines.append(f"  τ_δ = {_fmt(tau) if summary.get('reached') else 'не достигнуто'}")
    return "\n".join(lines)


_RENDERERS = {
    "simulate": render_simulate,
    "spectrum": render_spectrum,
    "rage": render_rage,
    "nash": render_nash,
    "quench": render_quench,
    "flow": render_flow,
}


def render_run_summary(record: RunRecord) -> str:
    parts: list[Optional[str]] = [render_header(record)]
    if record.kind == "sweep":
        parts.append(render_decay_curve(record.summary.get("rows", []), record.summary.get("delta", 0.5)))
    elif record.kind in _RENDERERS:
        parts.append(_RENDERERS[record.kind](record.summary))
    parts.append(render_checks(record.summary.get("checks", {})))
    parts.append(render_artifacts(record))
    return "\n\n".join(p for p in parts if p)


def render_error(field_path: Optional[str], message: str) -> str:
    if field_path:
        return f"⚠️ Ошибка в конфиге: {field_path}: {message}"
    return f"⚠️ Ошибка: {message}"
