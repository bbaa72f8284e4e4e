"""
Layer-stacking propagation simulator.

GCN-style and attention-style propagation with an optional residual
connection and a configurable normalization position, synthetic graph
generation and file-based ingestion of edge lists and feature tables.
"""

import csv
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Tuple

import networkx as nx
import numpy as np

import norms
from metrics import LayerDiagnostics, diagnostics
from norms import NormalizerConfig, NormVariant
from numerics import (
    ContractViolationError,
    LabError,
    NonFiniteInputError,
    NumericalFailureError,
    as_matrix,
    random_orthogonal,
    softmax_rows,
)

logger = logging.getLogger(__name__)

# independent PRNG streams derived from the run seed
FEATURE_STREAM = 0
MIXING_STREAM = 1


class Propagation(str, Enum):
    GCN = "gcn"
    ATTENTION = "attention"


class NormPosition(str, Enum):
    BEFORE_RESIDUAL = "before"
    AFTER_RESIDUAL = "after"


class OperatorKind(str, Enum):
    SYMMETRIC = "symmetric"
    ROW = "row"


class GraphKind(str, Enum):
    RING = "ring"
    COMPLETE = "complete"
    TWO_BLOCK_SBM = "sbm"


class InputFormatError(LabError, ValueError):
    """An edge-list or feature file could not be parsed"""

    def __init__(self, message: str, path: str = "", line_number: Optional[int] = None):
        where = f"{path}:{line_number}: " if line_number is not None else (f"{path}: " if path else "")
        super().__init__(f"{where}{message}")
        self.path = path
        self.line_number = line_number


class DivergenceError(LabError, ArithmeticError):
    """The propagated state became non-finite; carries what was measured before"""

    def __init__(self, layer_index: int, partial: List[LayerDiagnostics]):
        super().__init__(f"representations became non-finite at layer {layer_index}")
        self.layer_index = layer_index
        self.partial = partial


@dataclass(frozen=True)
class GraphTopology:
    """Undirected graph; edges stored as (min, max) pairs, self-loops come from the flag"""
    node_count: int
    edges: FrozenSet[Tuple[int, int]] = frozenset()
    self_loops_added: bool = True

    def __post_init__(self):
        if self.node_count < 1:
            raise ContractViolationError(f"graph needs at least one node, got {self.node_count}")
        normalized = set()
        for u, v in self.edges:
            u, v = int(u), int(v)
            if not (0 <= u < self.node_count and 0 <= v < self.node_count):
                raise ContractViolationError(f"edge ({u}, {v}) out of range for {self.node_count} nodes")
            if u == v:
                raise ContractViolationError(f"edge ({u}, {v}) is a self-loop; use self_loops_added")
            normalized.add((min(u, v), max(u, v)))
        object.__setattr__(self, 'edges', frozenset(normalized))

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        """Dense adjacency, with the identity added when self_loops_added"""
        a = np.zeros((self.node_count, self.node_count))
        if self.edges:
            rows, cols = zip(*self.edges)
            a[rows, cols] = 1.0
            a[cols, rows] = 1.0
        if self.self_loops_added:
            a += np.eye(self.node_count)
        return a

    def degrees(self) -> np.ndarray:
        return self.adjacency().sum(axis=1)

    def permuted(self, perm) -> 'GraphTopology':
        """Relabel node i as perm[i]"""
        perm = [int(p) for p in perm]
        return GraphTopology(
            self.node_count,
            frozenset((perm[u], perm[v]) for u, v in self.edges),
            self.self_loops_added,
        )


@dataclass(frozen=True)
class DynamicsConfig:
    propagation: Propagation = Propagation.ATTENTION
    depth: int = 1
    residual: bool = False
    norm: NormalizerConfig = field(default_factory=lambda: NormalizerConfig(NormVariant.NONE))
    norm_position: NormPosition = NormPosition.AFTER_RESIDUAL
    tau_attn: float = 1.0
    seed: int = 0
    record_spectrum: bool = False
    heads: int = 1
    operator_kind: OperatorKind = OperatorKind.SYMMETRIC
    mixing: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'propagation', Propagation(self.propagation))
        object.__setattr__(self, 'norm_position', NormPosition(self.norm_position))
        object.__setattr__(self, 'operator_kind', OperatorKind(self.operator_kind))
        if self.depth < 1:
            raise ContractViolationError(f"depth must be at least 1, got {self.depth}")
        if not self.tau_attn > 0:
            raise ContractViolationError(f"tau_attn must be positive, got {self.tau_attn}")
        if self.heads < 1:
            raise ContractViolationError(f"heads must be at least 1, got {self.heads}")
        if not 0 <= self.seed < 2 ** 64:
            raise ContractViolationError(f"seed must fit in 64 unsigned bits, got {self.seed}")

    def to_dict(self) -> Dict:
        return {
            'propagation': self.propagation.value,
            'depth': self.depth,
            'residual': self.residual,
            'norm': self.norm.to_dict(),
            'norm_position': self.norm_position.value,
            'tau_attn': self.tau_attn,
            'seed': self.seed,
            'record_spectrum': self.record_spectrum,
            'heads': self.heads,
            'operator_kind': self.operator_kind.value,
            'mixing': self.mixing,
        }


def gcn_operator(g: GraphTopology, kind: OperatorKind = OperatorKind.SYMMETRIC) -> np.ndarray:
    """
    D^-1/2 (A + I) D^-1/2 (symmetric) or D^-1 (A + I) (row-normalized).

    Raises:
        ContractViolationError: a node has degree zero (isolated without self-loops)
    """
    a = g.adjacency()
    deg = a.sum(axis=1)
    if np.any(deg == 0):
        isolated = [int(i) for i in np.flatnonzero(deg == 0)[:5]]
        raise ContractViolationError(f"isolated nodes without self-loops: {isolated}")
    if OperatorKind(kind) == OperatorKind.ROW:
        return a / deg[:, None]
    inv_sqrt = 1.0 / np.sqrt(deg)
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def attention_operator(h, tau: float) -> np.ndarray:
    """softmax(HH^T / tau) with identity query/key projections"""
    if not tau > 0:
        raise ContractViolationError(f"tau must be positive, got {tau}")
    h = as_matrix(h, "representations")
    return np.array(softmax_rows((h @ h.T) / tau))


def _attention_heads(h: np.ndarray, cfg: DynamicsConfig) -> Tuple[np.ndarray, List[np.ndarray]]:
    d = h.shape[1]
    if cfg.heads > d:
        raise ContractViolationError(f"{cfg.heads} heads need at least as many features, got d={d}")
    propagated = np.empty_like(h)
    operators = []
    for block in np.array_split(np.arange(d), cfg.heads):
        part = h[:, block]
        op = attention_operator(part, cfg.tau_attn)
        propagated[:, block] = op @ part
        operators.append(op)
    return propagated, operators


def step(h, cfg: DynamicsConfig, g: Optional[GraphTopology] = None,
         operator: Optional[np.ndarray] = None,
         mixing: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Optional[List[np.ndarray]]]:
    """
    One propagation layer followed by normalization.

    Without residual: norm(P h). With residual: norm(P h) + h when the norm
    sits before the residual, norm(P h + h) after it. Returns the attention
    operators (one per head) when propagation is attention, else None.
    A precomputed GCN ``operator`` skips rebuilding it from ``g``.
    """
    h = as_matrix(h, "representations")
    operators = None
    if cfg.propagation == Propagation.ATTENTION:
        propagated, operators = _attention_heads(h, cfg)
    else:
        if operator is None:
            if g is None:
                raise ContractViolationError("GCN propagation needs a graph")
            operator = gcn_operator(g, cfg.operator_kind)
        if operator.shape[0] != h.shape[0]:
            raise ContractViolationError(
                f"graph has {operator.shape[0]} nodes but representations have {h.shape[0]} rows"
            )
        propagated = operator @ h

    if mixing is not None:
        propagated = propagated @ mixing

    if not np.all(np.isfinite(propagated)):
        raise NumericalFailureError("propagation produced non-finite values")

    if not cfg.residual:
        out = norms.apply(propagated, cfg.norm)
    elif cfg.norm_position == NormPosition.BEFORE_RESIDUAL:
        out = norms.apply(propagated, cfg.norm) + h
    else:
        out = norms.apply(propagated + h, cfg.norm)
    return out, operators


def _measure(h: np.ndarray, operators, cfg: DynamicsConfig, layer_index: int) -> LayerDiagnostics:
    diag = diagnostics(h, operators, tau=cfg.norm.tau, layer_index=layer_index)
    scalars = [diag.variance, diag.uniformity_loss, diag.vicreg_exp_loss, diag.dim_loss]
    if not all(np.isfinite(scalars)):
        raise NumericalFailureError(f"non-finite diagnostics at layer {layer_index}")
    return diag


def run(h0, cfg: DynamicsConfig, g: Optional[GraphTopology] = None) -> List[LayerDiagnostics]:
    """
    Propagate h0 through cfg.depth layers and measure every layer.

    Returns depth + 1 records, layer 0 being the input.

    Raises:
        DivergenceError: the state or its diagnostics became non-finite
    """
    h = np.array(as_matrix(h0, "initial representations"))
    operator = None
    if cfg.propagation == Propagation.GCN:
        if g is None:
            raise ContractViolationError("GCN propagation needs a graph")
        check_alignment(g, h)
        operator = gcn_operator(g, cfg.operator_kind)

    mixing_rng = np.random.default_rng([cfg.seed, MIXING_STREAM])
    logger.info(
        f"Running {cfg.depth} {cfg.propagation.value} layers, norm={cfg.norm.variant.value}, "
        f"residual={cfg.residual}, n={h.shape[0]}, d={h.shape[1]}"
    )

    records = [_measure(h, None, cfg, 0)]
    for layer in range(1, cfg.depth + 1):
        mixing = random_orthogonal(h.shape[1], mixing_rng) if cfg.mixing else None
        try:
            h, operators = step(h, cfg, g, operator=operator, mixing=mixing)
            if not np.all(np.isfinite(h)):
                raise NumericalFailureError(f"non-finite representations at layer {layer}")
            records.append(_measure(h, operators, cfg, layer))
        except (NumericalFailureError, NonFiniteInputError) as e:
            logger.warning(f"Divergence at layer {layer}: {e}")
            raise DivergenceError(layer, records) from e
        logger.debug(
            f"layer {layer}: variance={records[-1].variance:.6g}, "
            f"erank={records[-1].effective_rank}"
        )
    return records


def standard_features(n: int, d: int, seed: int) -> np.ndarray:
    """N(0, 1) feature matrix drawn from the run seed's feature stream"""
    if n < 1 or d < 1:
        raise ContractViolationError(f"feature shape must be positive, got {n}x{d}")
    rng = np.random.default_rng([seed, FEATURE_STREAM])
    return rng.standard_normal((n, d))


def _from_networkx(graph: nx.Graph, n: int) -> GraphTopology:
    edges = frozenset((min(u, v), max(u, v)) for u, v in graph.edges() if u != v)
    return GraphTopology(n, edges, self_loops_added=True)


def generate_graph(kind: GraphKind, n: int, p_in: float = 0.0, p_out: float = 0.0,
                   seed: int = 0) -> GraphTopology:
    """
    Ring and complete graphs are deterministic; the two-block SBM splits the
    nodes into halves (first block gets the floor) and draws edges with
    networkx's seeded Mersenne Twister.
    """
    kind = GraphKind(kind)
    if n < 1:
        raise ContractViolationError(f"graph needs at least one node, got {n}")
    if kind == GraphKind.RING:
        graph = nx.cycle_graph(n) if n > 2 else nx.path_graph(n)
    elif kind == GraphKind.COMPLETE:
        graph = nx.complete_graph(n)
    else:
        if not 0.0 <= p_out <= p_in <= 1.0:
            raise ContractViolationError(
                f"SBM needs 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}"
            )
        sizes = [n // 2, n - n // 2]
        probs = [[p_in, p_out], [p_out, p_in]]
        graph = nx.stochastic_block_model(sizes, probs, seed=seed, selfloops=False)
    topology = _from_networkx(graph, n)
    logger.info(f"Generated {kind.value} graph: {n} nodes, {topology.edge_count} edges")
    return topology


def load_graph(path: str, node_count: Optional[int] = None) -> GraphTopology:
    """
    Read a whitespace-separated "u v" edge list (0-based ids, '#' comments,
    duplicates merged, self-pairs dropped). Node count is max id + 1 unless
    given.
    """
    edges = set()
    max_id = -1
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, raw in enumerate(f, 1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise InputFormatError(f"expected 'u v', got {raw.strip()!r}", path, line_number)
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise InputFormatError(f"node ids must be integers, got {raw.strip()!r}", path, line_number)
            if u < 0 or v < 0:
                raise InputFormatError("node ids must be non-negative", path, line_number)
            max_id = max(max_id, u, v)
            if u == v:
                logger.debug(f"{path}:{line_number}: self-pair {u} dropped")
                continue
            edges.add((min(u, v), max(u, v)))

    inferred = max_id + 1
    if node_count is None:
        node_count = inferred
    elif node_count < inferred:
        raise InputFormatError(f"edge list references node {max_id} but node count is {node_count}", path)
    if node_count < 1:
        raise InputFormatError("edge list has no edges", path)
    logger.info(f"Loaded graph {path}: {node_count} nodes, {len(edges)} edges")
    return GraphTopology(node_count, frozenset(edges), self_loops_added=True)


def load_features(path: str) -> np.ndarray:
    """Headerless comma-separated float rows, one node per line"""
    rows = []
    width = None
    with open(path, 'r', encoding='utf-8', newline='') as f:
        for line_number, row in enumerate(csv.reader(f), 1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                raise InputFormatError(f"non-numeric value in {row!r}", path, line_number)
            if not all(np.isfinite(values)):
                raise InputFormatError("non-finite value", path, line_number)
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise InputFormatError(f"ragged row: {len(values)} values, expected {width}", path, line_number)
            rows.append(values)
    if not rows:
        raise InputFormatError("feature file is empty", path)
    logger.info(f"Loaded features {os.path.basename(path)}: {len(rows)}x{width}")
    return np.array(rows, dtype=np.float64)


def check_alignment(g: GraphTopology, features) -> None:
    rows = np.shape(features)[0]
    if rows != g.node_count:
        raise ContractViolationError(f"feature rows ({rows}) do not match graph nodes ({g.node_count})")
