"""
Static-batching scheduler simulator.

Batches run one after another; a batch costs prefill for its longest prompt plus one
decode step per token of its longest output, and every member pays for the longest.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from lengthcast.errors import LengthcastError, UsageError
from lengthcast.models.records import ActivationRecord
from lengthcast.models.schemas import CostModel, Job, JobOutcome, PredictionReport, SchedulingPolicy, SimReport
from lengthcast.utils.logging import get_logger
from lengthcast.utils.numerics import SeededRng

logger = get_logger("schedsim")

JOB_COLUMNS = ("id", "prompt_len", "true_out", "predicted_out", "submit_time")


class ConsistencyError(LengthcastError):
    """Raised when a batch plan and its job set disagree."""


def resolve_policy(policy: Union[str, SchedulingPolicy]) -> SchedulingPolicy:
    try:
        return SchedulingPolicy(policy)
    except ValueError as exc:
        valid = ", ".join(p.value for p in SchedulingPolicy)
        raise UsageError(f"unknown scheduling policy {policy!r}; expected one of: {valid}.") from exc


def plan_batches(
    jobs: Sequence[Job],
    policy: Union[str, SchedulingPolicy],
    batch_size: int,
    seed: int = 42,
) -> List[List[str]]:
    """Order jobs per policy and chunk into batches of at most ``batch_size`` ids."""
    policy = resolve_policy(policy)
    if batch_size < 1:
        raise UsageError(f"batch size must be >= 1, got {batch_size}.")
    if not jobs:
        raise UsageError("cannot plan an empty job list.")
    ordered = list(jobs)
    if policy is SchedulingPolicy.RANDOM:
        ordered = [ordered[i] for i in SeededRng(seed).permutation(len(ordered))]
    elif policy is SchedulingPolicy.SJF_ORACLE:
        ordered.sort(key=lambda job: (job.true_out, job.id))
    elif policy is SchedulingPolicy.SJF_PREDICTED:
        ordered.sort(key=lambda job: (job.predicted_out, job.id))
    return [[job.id for job in ordered[i : i + batch_size]] for i in range(0, len(ordered), batch_size)]


def simulate(
    plan: Sequence[Sequence[str]],
    jobs: Sequence[Job],
    cost: CostModel,
    policy: Union[str, SchedulingPolicy] = "custom",
) -> SimReport:
    """
    Run the plan in order. A batch starts once the previous one finished and all
    its members were submitted; members complete together.
    """
    if not jobs:
        raise ConsistencyError("cannot simulate an empty job list.")
    by_id: Dict[str, Job] = {job.id: job for job in jobs}
    if len(by_id) != len(jobs):
        raise ConsistencyError("job ids must be unique.")
    planned = [job_id for batch in plan for job_id in batch]
    if any(not batch for batch in plan):
        raise ConsistencyError("plan contains an empty batch.")
    if len(planned) != len(set(planned)) or set(planned) != set(by_id):
        missing = sorted(set(by_id) - set(planned))
        unknown = sorted(set(planned) - set(by_id))
        raise ConsistencyError(
            f"plan must cover every job exactly once (missing={missing[:5]}, unknown={unknown[:5]}, "
            f"planned={len(planned)}, jobs={len(by_id)})."
        )

    clock = 0.0
    outcomes: List[JobOutcome] = []
    allocated = 0
    actual = 0
    batch_size = max(len(batch) for batch in plan)
    for batch in plan:
        members = [by_id[job_id] for job_id in batch]
        start = max(clock, max(job.submit_time for job in members))
        longest_out = max(job.true_out for job in members)
        duration = cost.t_prefill_per_token * max(job.prompt_len for job in members) + cost.t_decode_per_step * longest_out
        clock = start + duration
        for job in members:
            outcomes.append(JobOutcome(id=job.id, completion_time=clock, jct=clock - job.submit_time))
            allocated += longest_out
            actual += job.true_out
    start_time = min(job.submit_time for job in jobs)
    total_time = clock - start_time
    report = SimReport(
        policy=policy.value if isinstance(policy, SchedulingPolicy) else str(policy),
        batch_size=batch_size,
        jobs=outcomes,
        throughput=len(outcomes) / total_time,
        mean_jct=float(np.mean([outcome.jct for outcome in outcomes])),
        padding_ratio=(allocated - actual) / actual,
        total_time=total_time,
        batches=[list(batch) for batch in plan],
    )
    logger.info(
        "simulation_complete",
        policy=report.policy,
        jobs=len(outcomes),
        batches=len(plan),
        throughput=report.throughput,
        padding_ratio=report.padding_ratio,
    )
    return report


def compare_policies(
    jobs: Sequence[Job],
    policies: Sequence[Union[str, SchedulingPolicy]],
    batch_size: int,
    cost: CostModel,
    seed: int = 42,
) -> List[SimReport]:
    """One report per policy over the same jobs, in the order given."""
    reports = []
    for policy in policies:
        policy = resolve_policy(policy)
        plan = plan_batches(jobs, policy, batch_size, seed)
        reports.append(simulate(plan, jobs, cost, policy))
    return reports


def lognormal_jobs(
    count: int,
    seed: int = 42,
    mu: float = 5.0,
    sigma: float = 0.8,
    max_length: int = 1024,
    prompt_len_range: tuple = (16, 48),
    prediction_noise: float = 0.0,
) -> List[Job]:
    """
    Seeded heavy-tailed workload. Predicted lengths are the true length times
    exp(Normal(0, prediction_noise)), so 0 gives perfect predictions.
    """
    if count < 1:
        raise UsageError(f"job count must be >= 1, got {count}.")
    rng = SeededRng(seed)
    true_out = np.clip(np.round(rng.lognormal(mu, sigma, size=count)), 1, max_length).astype(np.int64)
    prompt_len = rng.integers(prompt_len_range[0], prompt_len_range[1] + 1, size=count)
    factor = np.exp(rng.normal(0.0, prediction_noise, size=count)) if prediction_noise > 0 else np.ones(count)
    return [
        Job(
            id=f"job-{index:05d}",
            prompt_len=int(prompt_len[index]),
            true_out=int(true_out[index]),
            predicted_out=float(true_out[index] * factor[index]),
        )
        for index in range(count)
    ]


def assign_poisson_arrivals(jobs: Sequence[Job], rate: float, seed: int = 42) -> List[Job]:
    """Copy jobs with exponential inter-arrival gaps (``rate`` jobs per second) in input order."""
    if not rate > 0:
        raise UsageError(f"arrival rate must be positive, got {rate}.")
    gaps = SeededRng(seed).exponential(1.0 / rate, size=len(jobs))
    arrivals = np.cumsum(gaps)
    return [job.copy(update={"submit_time": float(at)}) for job, at in zip(jobs, arrivals)]


def jobs_from_predictions(report: PredictionReport, records: Sequence[ActivationRecord]) -> List[Job]:
    """Jobs whose prompt length comes from the records and predicted length from the report."""
    prompts = {record.id: record.prompt.n for record in records}
    missing = [row.id for row in report.rows if row.id not in prompts]
    if missing:
        raise ConsistencyError(f"{len(missing)} predicted ids have no record, e.g. {missing[:3]}.")
    return [
        Job(id=row.id, prompt_len=prompts[row.id], true_out=row.y_true, predicted_out=row.y_hat)
        for row in report.rows
    ]


def jobs_to_csv(jobs: Sequence[Job]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(JOB_COLUMNS)
    for job in jobs:
        writer.writerow([job.id, job.prompt_len, job.true_out, job.predicted_out, repr(float(job.submit_time))])
    return buffer.getvalue()


def write_jobs(path: Union[str, Path], jobs: Sequence[Job]) -> None:
    Path(path).write_text(jobs_to_csv(jobs), encoding="utf-8", newline="")
    logger.info("jobs_written", path=str(path), jobs=len(jobs))


def read_jobs(path: Union[str, Path]) -> List[Job]:
    """Read a jobs CSV; ``submit_time`` is optional and '#' comment lines are ignored."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [line for line in text.splitlines() if line.strip() and not line.startswith("#")]
    reader = csv.DictReader(lines)
    required = set(JOB_COLUMNS[:4])
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise UsageError(f"jobs file {path} must have columns {', '.join(JOB_COLUMNS[:4])}.")
    jobs: List[Job] = []
    for row_number, row in enumerate(reader, start=1):
        submit: Optional[str] = row.get("submit_time")
        try:
            jobs.append(
                Job(
                    id=row["id"],
                    prompt_len=int(row["prompt_len"]),
                    true_out=int(row["true_out"]),
                    predicted_out=float(row["predicted_out"]),
                    submit_time=float(submit) if submit else 0.0,
                )
            )
        except (TypeError, ValueError) as exc:
            raise UsageError(f"jobs file {path}, row {row_number}: {exc}") from exc
    return jobs
