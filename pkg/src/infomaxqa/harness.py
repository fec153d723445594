"""Training, evaluation, ablation, and estimator sanity drivers."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np

from . import autodiff as ad
from . import model as qm
from .autodiff import Tensor, backward, no_grad
from .config import RunConfig, VARIANTS
from .corpus import QAExample, Vocab
from .metrics import exact_match, token_f1
from .mi import (
    BilinearDiscriminator,
    DiscreteJoint,
    dv_bound,
    evaluate_bound,
    exact_mi_discrete,
    fit_discriminator,
    gaussian_mi,
    one_hot,
)
from .optim import Adam
from .regularizer import qainfomax_loss


class TrainingDiverged(RuntimeError):
    """Loss left the finite domain; carries the step and term breakdown."""

    def __init__(self, step: int, breakdown: dict):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


@dataclass
class PreparedExample:
    q_ids: np.ndarray
    p_ids: np.ndarray
    span: tuple[int, int]
    example: QAExample

    @property
    def length(self) -> int:
        return len(self.q_ids) + 1 + len(self.p_ids)


def prepare(examples: list[QAExample], vocab: Vocab) -> list[PreparedExample]:
    return [PreparedExample(vocab.encode(ex.question), vocab.encode(ex.passage),
                            (ex.answer_start, ex.answer_end), ex)
            for ex in examples]


def _bucketed_batches(n: int, batch_size: int, lengths: list[int],
                      rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle, then sort within coarse chunks so batches have similar
    sequence lengths; drops a trailing partial batch."""
    order = rng.permutation(n)
    chunk = batch_size * 8
    buckets = []
    for lo in range(0, n, chunk):
        part = order[lo:lo + chunk]
        buckets.extend(sorted(part.tolist(), key=lambda i: (lengths[i], i)))
    return [np.array(buckets[lo:lo + batch_size])
            for lo in range(0, len(buckets) - batch_size + 1, batch_size)]


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    log: list[dict]
    iter_per_sec: float
    wall_seconds: float
    variant: str
    seed: int


def train_model(config: RunConfig, variant: str,
                train_examples: list[QAExample], vocab: Vocab) -> TrainResult:
    """Gradient descent on the span loss plus, for non-baseline variants,
    the weighted information penalty.  Fully deterministic given (config,
    seed) apart from the wall-clock throughput numbers."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    seed = config["seed"]
    cfg = config.encoder_config(len(vocab))
    params = qm.init_params(cfg, np.random.default_rng([seed, 0]))
    weights = config.regularizer_weights(variant)
    gamma = weights.gamma
    use_reg = variant != "baseline" and (weights.alpha > 0 or weights.beta > 0)

    lc_disc = gc_disc = None
    if use_reg:
        if config["reg.shared_discriminator"]:
            lc_disc = gc_disc = BilinearDiscriminator(
                cfg.d_model, np.random.default_rng([seed, 1]), "disc")
        else:
            lc_disc = BilinearDiscriminator(cfg.d_model,
                                            np.random.default_rng([seed, 1]), "lc")
            gc_disc = BilinearDiscriminator(cfg.d_model,
                                            np.random.default_rng([seed, 2]), "gc")
    all_params = dict(params)
    if use_reg:
        all_params.update(lc_disc.parameters())
        all_params.update(gc_disc.parameters())
    opt = Adam(all_params, lr=config["optim.lr"],
               weight_decay=config["optim.weight_decay"])

    prepared = prepare(train_examples, vocab)
    lengths = [p.length for p in prepared]
    order_rng = np.random.default_rng([seed, 3])
    reg_rng = np.random.default_rng([seed, 4])
    batch_size = config["optim.batch_size"]
    steps = config["optim.steps"]
    log_every = config["log.every"]
    summarizer = config["gc.summarizer"]

    log: list[dict] = []
    batches: list[np.ndarray] = []
    step = 0
    start = time.perf_counter()
    while step < steps:
        if not batches:
            batches = _bucketed_batches(len(prepared), batch_size, lengths, order_rng)
        idx = batches.pop(0)
        group = [prepared[i] for i in idx]
        seqs = qm.make_batch([p.q_ids for p in group], [p.p_ids for p in group],
                             [p.span for p in group], vocab.sep_id)
        hidden = qm.encode_batch(params, cfg, seqs)
        sl, el = qm.span_logits_batch(params, hidden, seqs)
        span = qm.span_loss_batch(sl, el, seqs)
        breakdown = {"step": step, "span_loss": float(span.data)}
        loss = span
        if use_reg:
            encoded = qm.split_examples(hidden, seqs)
            penalty, parts = qainfomax_loss(encoded, weights, lc_disc, gc_disc,
                                            reg_rng, summarizer)
            loss = span + ad.scale(penalty, gamma)
            breakdown["info_loss"] = float(penalty.data)
            breakdown["lc"] = parts["lc"]
            breakdown["gc"] = parts["gc"]
        if not np.isfinite(loss.data):
            raise TrainingDiverged(step, breakdown)
        opt.zero_grad()
        backward(loss)
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            log.append(breakdown)
        step += 1
    elapsed = time.perf_counter() - start

    return TrainResult(params=all_params, log=log,
                       iter_per_sec=steps / elapsed if elapsed > 0 else float("inf"),
                       wall_seconds=elapsed, variant=variant, seed=seed)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

EVAL_MODES = ("clean", "addsent", "addonesent")


def _predict_many(params: dict[str, Tensor], cfg, vocab: Vocab,
                  items: list[tuple[np.ndarray, np.ndarray]], max_answer_len: int,
                  batch_size: int = 32) -> list[tuple[int, int]]:
    """Predicted spans for (question_ids, passage_ids) pairs, batched."""
    out: list[tuple[int, int]] = []
    with no_grad():
        for lo in range(0, len(items), batch_size):
            part = items[lo:lo + batch_size]
            seqs = qm.make_batch([q for q, _ in part], [p for _, p in part],
                                 [(0, 0)] * len(part), vocab.sep_id)
            hidden = qm.encode_batch(params, cfg, seqs)
            sl, el = qm.span_logits_batch(params, hidden, seqs)
            for b in range(len(part)):
                plo, phi = seqs.passage_range(b)
                out.append(qm.predict_span(sl.data[b, plo:phi],
                                           el.data[b, plo:phi], max_answer_len))
    return out


@dataclass
class EvalResult:
    clean_f1: float = float("nan")
    clean_em: float = float("nan")
    addsent_f1: float = float("nan")
    addonesent_f1: float = float("nan")
    per_example: dict[str, list[float]] = field(default_factory=dict)
    addonesent_choice_seed: int | None = None


def evaluate_model(params: dict[str, Tensor], config: RunConfig, vocab: Vocab,
                   examples: list[QAExample], mode: str,
                   rng: np.random.Generator | None = None) -> EvalResult:
    """Score a model on one corpus.

    ``clean`` scores the unmodified passages.  ``addsent`` appends each
    candidate distractor in turn and keeps the per-example minimum F1;
    ``addonesent`` appends one rng-chosen candidate.  Choosing from the same
    candidate pool makes per-example addsent <= addonesent by construction.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    cfg = config.encoder_config(len(vocab))
    max_len = config["model.max_answer_len"]
    result = EvalResult()

    if mode == "clean":
        items = [(vocab.encode(ex.question), vocab.encode(ex.passage))
                 for ex in examples]
        spans = _predict_many(params, cfg, vocab, items, max_len)
        f1s, ems = [], []
        for ex, (s, e) in zip(examples, spans):
            predicted = ex.passage[s:e + 1]
            f1s.append(token_f1(predicted, ex.answer_tokens))
            ems.append(exact_match(predicted, ex.answer_tokens))
        result.clean_f1 = float(np.mean(f1s))
        result.clean_em = float(np.mean(ems))
        result.per_example = {"clean_f1": f1s}
        return result

    if any(not ex.distractors for ex in examples):
        raise ValueError(f"mode {mode!r} needs distractors but the corpus has none")
    if rng is None:
        raise ValueError(f"mode {mode!r} needs a generator for candidate choice")

    per_candidate = _candidate_f1s(params, config, vocab, examples)

    if mode == "addsent":
        worst = [min(c) for c in per_candidate]
        result.addsent_f1 = float(np.mean(worst))
        result.per_example = {"addsent_f1": worst}
    else:
        chosen = [c[int(rng.integers(len(c)))] for c in per_candidate]
        result.addonesent_f1 = float(np.mean(chosen))
        result.per_example = {"addonesent_f1": chosen}
    return result


def _candidate_f1s(params: dict[str, Tensor], config: RunConfig, vocab: Vocab,
                   examples: list[QAExample]) -> list[list[float]]:
    """F1 per (example, appended candidate distractor), in candidate order."""
    cfg = config.encoder_config(len(vocab))
    max_len = config["model.max_answer_len"]
    items, owners = [], []
    for i, ex in enumerate(examples):
        q = vocab.encode(ex.question)
        for d in ex.distractors:
            items.append((q, vocab.encode(ex.passage + d)))
            owners.append(i)
    spans = _predict_many(params, cfg, vocab, items, max_len)
    per_candidate: list[list[float]] = [[] for _ in examples]
    for (s, e), i in zip(spans, owners):
        ex = examples[i]
        adversarial = ex.passage + ex.distractors[len(per_candidate[i])]
        per_candidate[i].append(token_f1(adversarial[s:e + 1], ex.answer_tokens))
    return per_candidate


def evaluate_all(params: dict[str, Tensor], config: RunConfig, vocab: Vocab,
                 examples: list[QAExample],
                 choice_seed: int) -> EvalResult:
    """All three modes in one pass, reusing the per-candidate predictions so
    the addsent/addonesent comparison is over the identical pool."""
    clean = evaluate_model(params, config, vocab, examples, "clean")
    if any(not ex.distractors for ex in examples):
        raise ValueError("adversarial modes need distractors in the corpus")
    per_candidate = _candidate_f1s(params, config, vocab, examples)

    rng = np.random.default_rng(choice_seed)
    worst = [min(c) for c in per_candidate]
    chosen = [c[int(rng.integers(len(c)))] for c in per_candidate]

    result = EvalResult(
        clean_f1=clean.clean_f1, clean_em=clean.clean_em,
        addsent_f1=float(np.mean(worst)),
        addonesent_f1=float(np.mean(chosen)),
        addonesent_choice_seed=choice_seed,
    )
    result.per_example = {"clean_f1": clean.per_example["clean_f1"],
                          "addsent_f1": worst, "addonesent_f1": chosen}
    return result


# ---------------------------------------------------------------------------
# single runs and the ablation grid
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("variant", "seed", "clean_f1", "clean_em", "addsent_f1",
                  "addonesent_f1", "iter_per_sec")


def addonesent_choice_seed(seed: int) -> int:
    """Per-run candidate-choice seed, derived from the run seed and recorded
    in reports."""
    return int(np.random.SeedSequence([seed, 7]).generate_state(1)[0])


def run_single(config: RunConfig, variant: str, train_examples: list[QAExample],
               eval_examples: list[QAExample], vocab: Vocab) -> dict:
    """Train one variant and evaluate all three modes; returns a report row."""
    result = train_model(config, variant, train_examples, vocab)
    ev = evaluate_all(result.params, config, vocab, eval_examples,
                      addonesent_choice_seed(config["seed"]))
    return {
        "variant": variant, "seed": config["seed"],
        "clean_f1": ev.clean_f1, "clean_em": ev.clean_em,
        "addsent_f1": ev.addsent_f1, "addonesent_f1": ev.addonesent_f1,
        "iter_per_sec": result.iter_per_sec,
        "_train": result, "_eval": ev,
    }


def _grid_worker(args) -> dict:
    values, variant, seed, train_examples, eval_examples, vocab_tokens = args
    config = RunConfig(values)
    config["seed"] = seed
    row = run_single(config, variant, train_examples, eval_examples,
                     Vocab(vocab_tokens))
    row.pop("_train")
    row.pop("_eval")
    return row


def run_grid(config: RunConfig, cells: list[tuple[str, int, dict]],
             train_examples: list[QAExample], eval_examples: list[QAExample],
             vocab: Vocab, jobs: int = 1) -> list[dict]:
    """Run (variant, seed, extra-overrides) cells, optionally in parallel
    processes; output order matches the input order either way."""
    tasks = []
    for variant, seed, extra in cells:
        values = dict(config._values)
        values.update(extra)
        tasks.append((values, variant, seed, train_examples, eval_examples,
                      vocab.tokens))
    if jobs <= 1:
        return [_grid_worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs,
                             mp_context=get_context("spawn")) as pool:
        return list(pool.map(_grid_worker, tasks))


def aggregate_best(rows: list[dict]) -> dict[str, dict]:
    """Best score per metric over seeds for each variant label; throughput
    is averaged rather than maximized."""
    by_variant: dict[str, list[dict]] = {}
    for row in rows:
        by_variant.setdefault(row["variant"], []).append(row)
    out = {}
    for variant, group in by_variant.items():
        out[variant] = {
            "clean_f1": max(r["clean_f1"] for r in group),
            "clean_em": max(r["clean_em"] for r in group),
            "addsent_f1": max(r["addsent_f1"] for r in group),
            "addonesent_f1": max(r["addonesent_f1"] for r in group),
            "iter_per_sec": float(np.mean([r["iter_per_sec"] for r in group])),
            "seeds": sorted(r["seed"] for r in group),
        }
    return out


# ---------------------------------------------------------------------------
# estimator sanity experiments
# ---------------------------------------------------------------------------

def _gaussian_features(values: np.ndarray) -> np.ndarray:
    """Quadratic feature map: the optimal critic for a correlated Gaussian
    pair is a quadratic form, which the bilinear critic spans exactly."""
    return np.stack([np.ones_like(values), values, values * values], axis=1)


def mi_sanity(seed: int = 0, train_samples: int = 4096, eval_samples: int = 8192,
              steps: int = 300, lr: float = 0.05) -> dict:
    """Train critics on known joints and compare the bound estimates with
    the closed-form values.  Returns one record per experiment, including
    the margin by which each estimate respects (or violates) the truth."""
    report: dict[str, dict] = {}

    case_keys = {"independent": 11, "diagonal": 12}

    def discrete_case(name, table):
        joint = DiscreteJoint(np.asarray(table))
        true = exact_mi_discrete(joint)
        rng = np.random.default_rng([seed, case_keys[name]])
        xi, yi = joint.sample(train_samples, rng)
        k = joint.table.shape[0]
        disc = fit_discriminator(one_hot(xi, k), one_hot(yi, k), rng, "dv",
                                 steps=steps, lr=lr)
        xe, ye = joint.sample(eval_samples, rng)
        est = evaluate_bound(disc, one_hot(xe, k), one_hot(ye, k), rng, "dv")
        report[name] = {"estimate": est, "true_mi": true,
                        "bound_margin": true - est}
        return rng, disc

    rng, dv_disc = discrete_case("independent", np.full((2, 2), 0.25))
    xi, yi = DiscreteJoint(np.full((2, 2), 0.25)).sample(train_samples, rng)
    js_disc = fit_discriminator(one_hot(xi, 2), one_hot(yi, 2), rng, "js",
                                steps=steps, lr=lr)
    xe, ye = DiscreteJoint(np.full((2, 2), 0.25)).sample(eval_samples, rng)
    report["independent"]["js_loss"] = evaluate_bound(
        js_disc, one_hot(xe, 2), one_hot(ye, 2), rng, "js")

    discrete_case("diagonal", [[0.5, 0.0], [0.0, 0.5]])

    rho = 0.9
    grng = np.random.default_rng([seed, 99])
    x = grng.normal(size=train_samples)
    y = rho * x + np.sqrt(1 - rho * rho) * grng.normal(size=train_samples)
    disc = fit_discriminator(_gaussian_features(x), _gaussian_features(y), grng,
                             "dv", steps=steps, lr=lr)
    xe = grng.normal(size=eval_samples)
    ye = rho * xe + np.sqrt(1 - rho * rho) * grng.normal(size=eval_samples)
    est = evaluate_bound(disc, _gaussian_features(xe), _gaussian_features(ye),
                         grng, "dv")
    report["gaussian_rho0.9"] = {"estimate": est, "true_mi": gaussian_mi(rho),
                                 "bound_margin": gaussian_mi(rho) - est}

    srng = np.random.default_rng([seed, 123])
    worst = 0.0
    for _ in range(100):
        pos = srng.normal(size=8)
        neg = srng.normal(size=8)
        c = srng.normal() * 5
        with no_grad():
            a = dv_bound(Tensor(pos), Tensor(neg)).item()
            b = dv_bound(Tensor(pos + c), Tensor(neg + c)).item()
        worst = max(worst, abs(a - b))
    report["dv_shift_invariance"] = {"max_abs_shift_error": worst}
    return report
