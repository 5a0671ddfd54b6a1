"""
PDF Report Summary - one-page overview of a scenario bundle using reportlab.
"""

from typing import Optional

from reportlab.lib.colors import HexColor, black, white
from reportlab.lib.pagesizes import letter
from reportlab.pdfgen import canvas

# Colors
DARK_BLUE = HexColor("#1a365d")
LIGHT_GRAY = HexColor("#f7fafc")
MUTED = HexColor("#718096")
FAIL_RED = HexColor("#c53030")

MAX_ROWS = 24


def generate_report_pdf(bundle: dict, output_path: str, manifest_digest: Optional[str] = None) -> None:
    """
    Write a table of scenario tasks (task, status, headline values) and the
    rate/simulation cross-checks.

    Args:
        bundle: Report bundle as produced by the report command
        output_path: Path to save the PDF
        manifest_digest: Run key printed in the footer
    """
    c = canvas.Canvas(output_path, pagesize=letter)
    width, height = letter

    # === HEADER ===
    c.setFont("Helvetica-Bold", 22)
    c.setFillColor(DARK_BLUE)
    c.drawString(50, height - 60, "Rate Function Report")

    c.setFont("Helvetica", 10)
    c.setFillColor(MUTED)
    c.drawString(50, height - 80, f"Scenario: {bundle.get('scenario', '')}")

    # === TASK TABLE ===
    table_top = height - 120
    c.setFillColor(DARK_BLUE)
    c.rect(50, table_top - 5, width - 100, 20, fill=1, stroke=0)

    cols = {"task": 55, "status": 200, "value": 280}
    c.setFillColor(white)
    c.setFont("Helvetica-Bold", 9)
    c.drawString(cols["task"], table_top, "TASK")
    c.drawString(cols["status"], table_top, "STATUS")
    c.drawString(cols["value"], table_top, "RESULT")

    row_height = 20
    y = table_top - 25
    for i, task in enumerate(bundle.get("tasks", [])[:MAX_ROWS]):
        if i % 2 == 0:
            c.setFillColor(LIGHT_GRAY)
            c.rect(50, y - 5, width - 100, row_height, fill=1, stroke=0)

        ok = task.get("status") == "ok"
        c.setFont("Helvetica", 9)
        c.setFillColor(black)
        c.drawString(cols["task"], y + 2, f"{i + 1}. {task.get('task', '?')}")
        c.setFillColor(black if ok else FAIL_RED)
        c.drawString(cols["status"], y + 2, task.get("status", ""))
        c.setFillColor(black)
        c.drawString(cols["value"], y + 2, _headline(task))
        y -= row_height

    # === CROSS-CHECKS ===
    checks = bundle.get("cross_checks", [])
    if checks:
        y -= 20
        c.setFont("Helvetica-Bold", 11)
        c.setFillColor(DARK_BLUE)
        c.drawString(50, y, "Rate vs. simulation")
        y -= 18
        c.setFont("Helvetica", 9)
        for check in checks:
            c.setFillColor(black if check.get("within_band") else FAIL_RED)
            c.drawString(55, y, (f"L = {_fmt(check.get('L'))}   qHat = {_fmt(check.get('q_hat'))}   "
                                 f"ratio = {_fmt(check.get('ratio'))}"))
            y -= 14

    # === FOOTER ===
    c.setFillColor(HexColor("#a0aec0"))
    c.setFont("Helvetica", 8)
    if manifest_digest:
        c.drawString(50, 40, f"manifest {manifest_digest}")

    c.save()


def _headline(task: dict) -> str:
    """Short text for the result column."""
    if task.get("status") != "ok":
        message = str(task.get("error", ""))
        return message[:57] + "..." if len(message) > 60 else message
    result = task.get("result", {})
    for key in ("value", "q_hat", "spectral_radius", "max_abs_phi"):
        if key in result:
            return f"{key} = {_fmt(result[key])}"
    return ""


def _fmt(x) -> str:
    if x is None:
        return "-"
    try:
        return f"{float(x):.6g}"
    except (TypeError, ValueError):
        return str(x)
