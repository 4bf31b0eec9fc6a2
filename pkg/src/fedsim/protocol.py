"""Message topics and header conventions shared by the server and clients.

Registration: the client sends ``register`` (headers ``client-name``,
``heartbeat-secs``); the server answers ``welcome`` (``job-id``,
``total-rounds``) or ``reject`` (``reason``, ``code``).

Tasks: ``task`` messages carry an FLM1 model body and headers ``task-id``,
``task-name``, ``round``, ``total-rounds``, ``job-id``. Clients answer with
``result`` (``task-id``, ``status``, ``client-name`` and, for failures,
``error``). ``job-end`` tells clients to stop.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .model import FLModel, encode_model_parts
from .sfm import Message

REGISTER = "register"
WELCOME = "welcome"
REJECT = "reject"
TASK = "task"
RESULT = "result"
JOB_END = "job-end"

TRAIN = "train"
VALIDATE = "validate"

REJECT_DUPLICATE = "duplicate-name"


class TaskStatus(str, enum.Enum):
    OK = "OK"
    FAILED = "FAILED"
    TIMEOUT = "TIMEOUT"


@dataclass
class Task:
    task_id: int
    task_name: str
    round: int
    payload: FLModel
    timeout: float | None = None

    def __post_init__(self):
        if not self.task_name:
            raise ValueError("task_name must be non-empty")


@dataclass
class TaskResult:
    task_id: int
    client_name: str
    status: TaskStatus
    payload: FLModel | None = None
    error: str = ""
    wire_bytes: int = 0

    @property
    def ok(self) -> bool:
        return self.status is TaskStatus.OK


def task_message(task: Task, total_rounds: int, job_id: str, body: bytes | None = None) -> Message:
    headers = {
        "task-id": str(task.task_id),
        "task-name": task.task_name,
        "round": str(task.round),
        "total-rounds": str(total_rounds),
        "job-id": job_id,
    }
    if body is None:
        body = encode_model_parts(task.payload)
    return Message(TASK, body, headers, kind="object", size=_size(body))


def result_message(task_id: int, client_name: str, model: FLModel | None, error: str = "") -> Message:
    headers = {"task-id": str(task_id), "client-name": client_name}
    if model is None:
        headers["status"] = TaskStatus.FAILED.value
        headers["error"] = error.replace("\n", " ")[:2000]
        return Message(RESULT, b"", headers, kind="object")
    headers["status"] = TaskStatus.OK.value
    body = encode_model_parts(model)
    return Message(RESULT, body, headers, kind="object", size=_size(body))


def _size(body) -> int | None:
    if isinstance(body, list):
        return sum(memoryview(p).nbytes for p in body)
    return None
