"""Named model architectures, rebuilt from ``(name, kwargs)`` on load."""
import torch

from . import exponential as ex
from .flows import (ActNorm, AffineCoupling, ConvExpLayer, FlowModel, GNNConditioner,
                    GraphConvExpLayer, Invertible1x1, MLPConditioner)
from .sylvester import conv_sylvester_layer

GRAPH_MODELS = ("graphflow", "graphflow+exp")
MODELS = ("coupling",) + GRAPH_MODELS + ("convsylvester2d",)


def _graph_flow(num_nodes, nf, conditioner, use_exp, subflows, hidden, terms, rounds=1,
                precision="float64", edge_hidden=32):
    layers = []
    n_pass = nf // 2
    for k in range(subflows):
        layers.append(ActNorm(nf, layout="graph"))
        layers.append(Invertible1x1(nf, layout="graph"))
        if use_exp:
            layers.append(GraphConvExpLayer(nf, max_neighbours=max(num_nodes - 1, 1),
                                            exp_config=ex.ExpConfig.terms(terms), seed=k))
        parity = k % 2
        n_active = nf - n_pass
        n_in = n_active if parity else n_pass
        n_out = 2 * (n_pass if parity else n_active)
        if conditioner == "mlp":
            net = MLPConditioner(num_nodes, n_in, n_out, hidden=hidden, precision=precision)
        else:
            net = GNNConditioner(n_in, n_out, hidden=hidden, rounds=rounds, precision=precision,
                                 edge_hidden=edge_hidden)
        layers.append(AffineCoupling(net, nf, layout="graph", split="channel", parity=parity))
    return FlowModel(layers, (num_nodes, nf), layout="graph")


def build_model(name, event_shape, subflows=3, hidden=64, terms=6, seed=0, **kw):
    """Build a model by name; the result carries ``.config`` for serialization.

    ``event_shape`` is ``(N, nf)`` for the graph-layout models and
    ``(c, h, w)`` for ``convsylvester2d``.
    """
    torch.manual_seed(seed)
    graph_kw = {"rounds": kw.get("rounds", 1), "precision": kw.get("precision", "float64"),
                "edge_hidden": kw.get("edge_hidden", 32)}
    if name == "coupling":
        N, nf = event_shape
        model = _graph_flow(N, nf, "mlp", False, subflows, hidden, terms, **graph_kw)
    elif name == "graphflow":
        N, nf = event_shape
        model = _graph_flow(N, nf, "gnn", False, subflows, hidden, terms, **graph_kw)
    elif name == "graphflow+exp":
        N, nf = event_shape
        model = _graph_flow(N, nf, "gnn", True, subflows, hidden, terms, **graph_kw)
    elif name == "convsylvester2d":
        layers = []
        for k in range(subflows):
            layers.append(ActNorm(event_shape[0], layout="image"))
            if kw.get("conv_exp", False):
                layers.append(ConvExpLayer(event_shape, exp_config=ex.ExpConfig.terms(terms),
                                           seed=100 + k))
            layers.append(conv_sylvester_layer(event_shape, hidden_channels=hidden,
                                               depth=kw.get("depth", 2),
                                               gamma=kw.get("gamma", 0.5),
                                               exp_config=ex.ExpConfig.terms(terms),
                                               seed=10 * k))
        model = FlowModel(layers, event_shape, layout="image")
    else:
        raise ValueError(f"unknown model {name!r}; choose from {MODELS}")
    model.config = {"name": name, "event_shape": list(event_shape), "subflows": subflows,
                    "hidden": hidden, "terms": terms, "seed": seed, **kw}
    return model


def event_shape_for(model_name, dataset_name, num_nodes=None):
    """Tensor layout a dataset takes inside a given model."""
    if dataset_name == "moons2d":
        if model_name == "convsylvester2d":
            return (1, 1, 2)
        if model_name == "coupling":
            return (1, 2)
        raise ValueError(f"model {model_name!r} needs a graph dataset")
    if model_name == "convsylvester2d":
        raise ValueError("convsylvester2d is only defined for moons2d")
    return (num_nodes, 2)


def rebuild(config):
    cfg = dict(config)
    name = cfg.pop("name")
    shape = tuple(cfg.pop("event_shape"))
    return build_model(name, shape, **cfg)
