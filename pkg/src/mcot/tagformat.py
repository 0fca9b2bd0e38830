"""Tagged solution markup: parsing, rendering, and answer extraction.

A solution block looks like::

    <solution>
    free-form analysis
    <code>
    print(1 + 1)
    </code>

    <output>
    2
    </output>

    Final Answer: \\(2\\)
    </solution>

The code and output sections are optional.  A block ends with at most
one terminal line, anchored at the start of a line: ``Sub Question:``
hands off a reduced question, ``Final Answer:`` commits to an answer.
Both markers are case-sensitive.

Parsing is total: any byte string either yields a block or raises
:class:`TagParseError` carrying a character offset.  Parsing also
canonicalizes: section padding is trimmed, and commentary between the
last tagged section and the terminal line is not retained (analysis is
the prose before ``<code>``).  Rendering refuses field content that
could not be parsed back, such as a literal ``</code>`` inside code.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

SOLUTION_OPEN = "<solution>"
SOLUTION_CLOSE = "</solution>"
CODE_OPEN = "<code>"
CODE_CLOSE = "</code>"
OUTPUT_OPEN = "<output>"
OUTPUT_CLOSE = "</output>"

SUB_QUESTION_MARKER = "Sub Question:"
FINAL_ANSWER_MARKER = "Final Answer:"


class TagParseError(ValueError):
    """Malformed block markup, with the character offset of the fault."""

    def __init__(self, offset: int, reason: str) -> None:
        self.offset = offset
        self.reason = reason
        super().__init__(f"offset {offset}: {reason}")


class RenderError(ValueError):
    """Block field content that the markup cannot represent."""


class AnswerFormatError(ValueError):
    """Terminal answer text that strips down to nothing."""


class TerminalKind(str, Enum):
    SUB_QUESTION = "sub_question"
    FINAL_ANSWER = "final_answer"


@dataclass(frozen=True, slots=True)
class Terminal:
    kind: TerminalKind
    text: str


@dataclass(frozen=True, slots=True)
class SolutionBlock:
    analysis: str
    code: str | None = None
    output: str | None = None
    terminal: Terminal | None = None

    @property
    def has_code(self) -> bool:
        return self.code is not None and bool(self.code.strip())


_MARKERS = (
    (SUB_QUESTION_MARKER, TerminalKind.SUB_QUESTION),
    (FINAL_ANSWER_MARKER, TerminalKind.FINAL_ANSWER),
)


def _scan_terminal(region: str, base: int) -> tuple[Terminal | None, int]:
    """Find the single terminal marker line in region.

    Returns the terminal (or None) and the offset within region where
    the terminal line starts (len(region) when absent).
    """
    found: list[tuple[int, Terminal]] = []
    offset = 0
    for line in region.split("\n"):
        for marker, kind in _MARKERS:
            if line.startswith(marker):
                found.append((offset, Terminal(kind, line[len(marker):].strip())))
                break
        offset += len(line) + 1
    if len(found) > 1:
        raise TagParseError(base + found[1][0], "more than one terminal marker in block")
    if not found:
        return None, len(region)
    return found[0][1], found[0][0]


def _unwrap(text: str) -> tuple[str, int]:
    stripped = text.strip()
    lead = len(text) - len(text.lstrip())
    if not stripped:
        raise TagParseError(0, "empty input")
    if stripped.startswith(SOLUTION_OPEN):
        if not stripped.endswith(SOLUTION_CLOSE):
            raise TagParseError(lead, f"unclosed {SOLUTION_OPEN} tag")
        body = stripped[len(SOLUTION_OPEN):-len(SOLUTION_CLOSE)]
        base = lead + len(SOLUTION_OPEN)
        for tag in (SOLUTION_OPEN, SOLUTION_CLOSE):
            at = body.find(tag)
            if at != -1:
                raise TagParseError(base + at, f"nested {tag} tag")
        return body, base
    for tag in (SOLUTION_OPEN, SOLUTION_CLOSE):
        at = stripped.find(tag)
        if at != -1:
            raise TagParseError(lead + at, f"misplaced {tag} tag")
    return stripped, lead


def parse_solution(text: str) -> SolutionBlock:
    """Parse one solution block, with or without its outer tags."""
    body, base = _unwrap(text)

    code: str | None = None
    output: str | None = None

    ci = body.find(CODE_OPEN)
    if ci != -1:
        analysis_raw = body[:ci]
        misordered = analysis_raw.find(OUTPUT_OPEN)
        if misordered != -1:
            raise TagParseError(base + misordered, "output section precedes code section")
        cj = body.find(CODE_CLOSE, ci + len(CODE_OPEN))
        if cj == -1:
            raise TagParseError(base + ci, f"unclosed {CODE_OPEN} tag")
        code = body[ci + len(CODE_OPEN):cj].strip("\n")
        rest = body[cj + len(CODE_CLOSE):]
        rest_base = base + cj + len(CODE_CLOSE)
        dup = rest.find(CODE_OPEN)
        if dup != -1:
            raise TagParseError(rest_base + dup, "more than one code section in block")
    else:
        analysis_raw = body
        rest = ""
        rest_base = base + len(body)

    search = rest if ci != -1 else body
    search_base = rest_base if ci != -1 else base
    oi = search.find(OUTPUT_OPEN)
    if oi != -1:
        oj = search.find(OUTPUT_CLOSE, oi + len(OUTPUT_OPEN))
        if oj == -1:
            raise TagParseError(search_base + oi, f"unclosed {OUTPUT_OPEN} tag")
        output = search[oi + len(OUTPUT_OPEN):oj].strip("\n")
        if ci == -1:
            analysis_raw = body[:oi]
        post = search[oj + len(OUTPUT_CLOSE):]
        post_base = search_base + oj + len(OUTPUT_CLOSE)
        dup = post.find(OUTPUT_OPEN)
        if dup != -1:
            raise TagParseError(post_base + dup, "more than one output section in block")
    else:
        post = rest if ci != -1 else body
        post_base = rest_base if ci != -1 else base

    terminal, cut = _scan_terminal(post, post_base)
    if ci == -1 and oi == -1:
        analysis_raw = body[:cut]

    return SolutionBlock(
        analysis=analysis_raw.strip(),
        code=code,
        output=output,
        terminal=terminal,
    )


def parse_document(text: str) -> list[SolutionBlock]:
    """Parse every <solution> region in text, left to right."""
    blocks: list[SolutionBlock] = []
    pos = 0
    while True:
        start = text.find(SOLUTION_OPEN, pos)
        if start == -1:
            break
        end = text.find(SOLUTION_CLOSE, start + len(SOLUTION_OPEN))
        if end == -1:
            raise TagParseError(start, f"unclosed {SOLUTION_OPEN} tag")
        region = text[start:end + len(SOLUTION_CLOSE)]
        nested = region.find(SOLUTION_OPEN, len(SOLUTION_OPEN))
        if nested != -1:
            raise TagParseError(start + nested, f"nested {SOLUTION_OPEN} tag")
        blocks.append(parse_solution(region))
        pos = end + len(SOLUTION_CLOSE)
    return blocks


_ANALYSIS_FORBIDDEN = (SOLUTION_OPEN, SOLUTION_CLOSE, CODE_OPEN, OUTPUT_OPEN)


def _check_renderable(block: SolutionBlock) -> None:
    for tag in _ANALYSIS_FORBIDDEN:
        if tag in block.analysis:
            raise RenderError(f"analysis may not contain {tag}")
    for line in block.analysis.split("\n"):
        for marker, _ in _MARKERS:
            if line.startswith(marker):
                raise RenderError(f"analysis line may not start with {marker!r}")
    if block.code is not None:
        if CODE_CLOSE in block.code:
            raise RenderError(f"code may not contain a literal {CODE_CLOSE}")
        for tag in (SOLUTION_OPEN, SOLUTION_CLOSE):
            if tag in block.code:
                raise RenderError(f"code may not contain {tag}")
    if block.output is not None:
        if OUTPUT_CLOSE in block.output:
            raise RenderError(f"output may not contain a literal {OUTPUT_CLOSE}")
        for tag in (SOLUTION_OPEN, SOLUTION_CLOSE):
            if tag in block.output:
                raise RenderError(f"output may not contain {tag}")
    if block.terminal is not None:
        if "\n" in block.terminal.text:
            raise RenderError("terminal text must be a single line")
        for tag in (SOLUTION_OPEN, SOLUTION_CLOSE):
            if tag in block.terminal.text:
                raise RenderError(f"terminal text may not contain {tag}")


def _chunks(block: SolutionBlock, through_output_only: bool = False) -> list[str]:
    chunks: list[str] = []
    analysis = block.analysis.strip()
    if analysis:
        chunks.append(analysis)
    if block.code is not None:
        code = block.code.strip("\n")
        chunks.append(f"{CODE_OPEN}\n{code}\n{CODE_CLOSE}")
    if block.output is not None:
        output = block.output.strip("\n")
        chunks.append(f"{OUTPUT_OPEN}\n{output}\n{OUTPUT_CLOSE}")
    if through_output_only:
        return chunks
    if block.terminal is not None:
        marker = (
            SUB_QUESTION_MARKER
            if block.terminal.kind is TerminalKind.SUB_QUESTION
            else FINAL_ANSWER_MARKER
        )
        chunks.append(f"{marker} {block.terminal.text.strip()}")
    return chunks


def render_block(block: SolutionBlock) -> str:
    """Canonical text for a block; inverse of parse_solution on its output."""
    _check_renderable(block)
    body = "\n\n".join(_chunks(block))
    if not body:
        raise RenderError("block renders to empty markup")
    return f"{SOLUTION_OPEN}\n{body}\n{SOLUTION_CLOSE}"


def render_partial(block: SolutionBlock) -> str:
    """Open-ended render used to resume generation after an observation.

    The returned text ends right after the closing output tag (plus a
    newline) so the model continues with concluding prose and the
    terminal line.
    """
    _check_renderable(block)
    if block.output is None:
        raise RenderError("partial render requires an output section")
    body = "\n\n".join(_chunks(block, through_output_only=True))
    return f"{SOLUTION_OPEN}\n{body}\n"


_DELIMITER_PAIRS = (("\\(", "\\)"), ("\\[", "\\]"), ("$", "$"))


def extract_final_answer(terminal_text: str) -> str:
    """Strip math delimiters and whitespace from a final-answer line."""
    text = terminal_text.strip()
    changed = True
    while changed:
        changed = False
        for open_d, close_d in _DELIMITER_PAIRS:
            if (
                text.startswith(open_d)
                and text.endswith(close_d)
                and len(text) > len(open_d) + len(close_d) - (1 if open_d == close_d else 0)
            ):
                text = text[len(open_d):len(text) - len(close_d)].strip()
                changed = True
    if not text:
        raise AnswerFormatError(f"answer text {terminal_text!r} strips to nothing")
    return text
