from typing import Any, Callable
from datetime import datetime, timezone
from pathlib import Path
import json
import os
import threading
import time
import requests
from pydantic import BaseModel, ConfigDict, StrictBool, ValidationError

from pgir.enums import MatchSetDirection, RationaleLabel, Confidence, Rationale
from pgir.util import logger
from pgir.config import LabelerConfig


class LabelerError(RuntimeError):
    pass


class IntentRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    from_commit: str
    to_commit: str
    match_set_direction: MatchSetDirection
    predicate_modified_present: StrictBool
    predicate_added: StrictBool
    predicate_removed: StrictBool
    summary: str
    rationale_label: RationaleLabel
    rationale_confidence: Confidence
    rationale_support: str

    @property
    def rationale(self) -> Rationale:
        return Rationale.from_label(self.rationale_label)

    @property
    def asserts_change(self) -> bool:
        return self.predicate_modified_present or self.predicate_added or self.predicate_removed


def parse_response(content: str | dict) -> IntentRecord:
    """Strictly parse a labeler answer; raises ValueError on anything off-schema."""
    if isinstance(content, str):
        try:
            content = json.loads(content)
        except json.JSONDecodeError as e:
            raise ValueError("Labeler response is not valid JSON") from e

    try:
        return IntentRecord.model_validate(content)
    except ValidationError as e:
        raise ValueError(f"Labeler response violates the schema: {e.error_count()} errors") from e


def load_transcript(path: Path | str) -> dict[str, dict]:
    entries = {}
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid transcript entry") from e
            # Later entries win, so a rerun that appended fixes takes precedence
            entries[entry["pair_id"]] = entry

    return entries


class LabelerClient:
    """Queries an intent labeling endpoint or answers from a replay transcript.

    Transport errors and off-schema answers are retried with exponential backoff.
    Every live request is appended to the transcript if one is configured.
    """

    def __init__(
        self,
        config: LabelerConfig,
        session: Any = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.session = session
        self.sleep = sleep
        self._lock = threading.Lock()
        self._last_start = None
        self._replay = load_transcript(config.replay) if config.replay else None

        if self._replay is None:
            if not config.endpoint:
                raise LabelerError("No labeler endpoint configured and no replay transcript given")
            if self.session is None:
                self.session = requests.Session()

    @property
    def offline(self) -> bool:
        return self._replay is not None

    def request_payload(self, prompt: str) -> dict:
        return {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": prompt}],
            "response_format": {"type": "json_object"},
        }

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _throttle(self) -> None:
        interval = self.config.min_request_interval
        if interval <= 0:
            return

        with self._lock:
            now = time.monotonic()
            if self._last_start is not None:
                wait = self._last_start + interval - now
                if wait > 0:
                    self.sleep(wait)
                    now += wait
            self._last_start = now

    def _post(self, payload: dict) -> str:
        resp = self.session.post(
            self.config.endpoint,
            json=payload,
            headers=self._headers(),
            timeout=self.config.timeout,
        )
        resp.raise_for_status()

        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise ValueError("Unexpected response envelope") from e

    def _record(self, pair_id: str, payload: dict, content: str) -> None:
        if not self.config.transcript:
            return

        entry = {
            "pair_id": pair_id,
            "request": payload,
            "response": content,
            "timestamp": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        }
        with self._lock:
            with open(self.config.transcript, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True, ensure_ascii=False) + "\n")

    def query(self, pair_id: str, prompt: str) -> IntentRecord:
        if self._replay is not None:
            entry = self._replay.get(pair_id)
            if entry is None:
                raise LabelerError(f"No transcript entry for {pair_id}")
            try:
                return parse_response(entry["response"])
            except ValueError as e:
                raise LabelerError(f"Transcript entry for {pair_id} is unusable") from e

        payload = self.request_payload(prompt)
        last_error = None
        for attempt in range(self.config.max_attempts):
            if attempt > 0:
                delay = self.config.backoff * 2 ** (attempt - 1)
                logger.warning(f"{pair_id}: retrying in {delay:.1f}s ({last_error})")
                self.sleep(delay)

            self._throttle()
            try:
                content = self._post(payload)
            except (requests.RequestException, ValueError) as e:
                last_error = e
                continue

            self._record(pair_id, payload, content)
            try:
                return parse_response(content)
            except ValueError as e:
                last_error = e

        raise LabelerError(
            f"{pair_id}: no valid label after {self.config.max_attempts} attempts"
        ) from last_error
