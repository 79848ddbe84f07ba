"""Flow regressors over OD-node features: GCN, MLP and linear regression.

The GCN is two propagation layers and a linear head::

    H1 = relu(A X' W0 + b0)
    H2 = relu(A H1 W1 + b1)
    y  = H2 W2 + b2

where ``X'`` joins the scaled numeric columns with learned embeddings of the
time-of-day slot and day of week.  The MLP is the same thing with one hidden
layer and no propagation.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .kernels import Propagator

GCN_PARAMS = ("E_time", "E_dow", "W0", "b0", "W1", "b1", "W2", "b2")
MLP_PARAMS = ("E_time", "E_dow", "W0", "b0", "W2", "b2")
LR_RIDGE = 1e-8


@dataclass
class GcnConfig:
    input_dim: int  # numeric feature columns
    hidden_dim: int = 32
    embed_dim_time: int = 4
    embed_dim_dow: int = 2
    time_slots: int = 96
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "embed_dim_time", "embed_dim_dow", "time_slots"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def joined_dim(self):
        return self.input_dim + self.embed_dim_time + self.embed_dim_dow

    def to_dict(self):
        return asdict(self)


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(kind, config):
    """Seeded Glorot-uniform weights, zero biases.  ``kind`` is ``gcn`` or ``mlp``."""
    if kind not in ("gcn", "mlp"):
        raise ValueError(f"no trainable parameters for model kind {kind!r}")
    rng = np.random.default_rng(config.seed)
    h, f = config.hidden_dim, config.joined_dim
    shapes = {
        "E_time": (config.time_slots, config.embed_dim_time),
        "E_dow": (7, config.embed_dim_dow),
        "W0": (f, h),
        "b0": (1, h),
        "W1": (h, h),
        "b1": (1, h),
        "W2": (h, 1),
        "b2": (1, 1),
    }
    names = GCN_PARAMS if kind == "gcn" else MLP_PARAMS
    params = {}
    for name in names:
        shape = shapes[name]
        value = np.zeros(shape) if name.startswith("b") else glorot(rng, *shape)
        params[name] = nc.Param(value, name)
    return params


def joined_input(params, x_num, tod, dow):
    """``[numeric | E_time[tod] | E_dow[dow]]`` as a tape tensor."""
    return nc.concat_cols([nc.as_tensor(x_num), nc.embed(params["E_time"], tod), nc.embed(params["E_dow"], dow)])


def _propagator(adj):
    return adj if isinstance(adj, Propagator) else Propagator(adj)


def gcn_forward(adj, x, params, n_graphs=1):
    """Predictions ``(V * n_graphs, 1)`` for joined inputs ``x`` stacked node-major."""
    op = _propagator(adj)
    x = nc.as_tensor(x)
    if x.shape[0] != op.n * n_graphs:
        raise ValueError(f"operator has {op.n} nodes but input has {x.shape[0]} rows for {n_graphs} graphs")
    h = nc.relu(nc.add_bias(nc.matmul(nc.propagate(op, x, n_graphs), params["W0"]), params["b0"]))
    h = nc.relu(nc.add_bias(nc.matmul(nc.propagate(op, h, n_graphs), params["W1"]), params["b1"]))
    return nc.add_bias(nc.matmul(h, params["W2"]), params["b2"])


def mlp_forward(x, params):
    x = nc.as_tensor(x)
    if x.shape[1] != params["W0"].shape[0]:
        raise ValueError(f"input has {x.shape[1]} columns, W0 expects {params['W0'].shape[0]}")
    h = nc.relu(nc.add_bias(nc.matmul(x, params["W0"]), params["b0"]))
    return nc.add_bias(nc.matmul(h, params["W2"]), params["b2"])


def forward(kind, params, x, adj=None, n_graphs=1):
    if kind == "gcn":
        return gcn_forward(adj, x, params, n_graphs)
    if kind == "mlp":
        return mlp_forward(x, params)
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# linear regression


def one_hot(index, n_levels, drop_first=True):
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((index.size, n_levels))
    out[np.arange(index.size), index] = 1.0
    return out[:, 1:] if drop_first else out


def lr_design(x_num, tod, dow, time_slots):
    """Numeric columns plus reference-coded dummies for the two discrete features."""
    return np.hstack([x_num, one_hot(tod, time_slots), one_hot(dow, 7)])


def lr_fit(x, y, ridge=LR_RIDGE):
    """Closed-form ridge ``(X^T X + ridge I)^-1 X^T y`` with an appended ones column.

    Returns ``(weights, bias)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("linear regression needs at least one training row")
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y row counts differ")
    xa = np.hstack([x, np.ones((x.shape[0], 1))])
    return ridge_solve(xa.T @ xa, xa.T @ y, ridge)


def ridge_solve(gram, xty, ridge=LR_RIDGE):
    """Solve the ridge normal equations; the last coefficient is the bias."""
    gram = np.array(gram, dtype=np.float64)
    gram[np.diag_indices_from(gram)] += ridge
    coef = np.linalg.solve(gram, np.asarray(xty, dtype=np.float64))
    return coef[:-1], float(coef[-1])


def lr_predict(x, weights, bias):
    return np.asarray(x, dtype=np.float64) @ weights + bias
