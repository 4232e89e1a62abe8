# -*- coding: utf-8 -*-
"""
    Dependency graph over the agent's layers, pruning groups, norm-based
    importance and structured removal.

    Every layer reads one or more feature spaces and writes one. A prunable
    unit of a space couples the producer rows and bias entries that compute it
    with every consumer column that reads it. Spaces whose width the task fixes
    (observation, action, reward, values) are never pruned.
"""
import csv
import math
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from stabprune.agent import COMPONENTS, AgentModel
from stabprune.errors import ConfigError, GraphError, ManifestMismatchError

COMPONENT_INPUTS = {
    'encoder': ('obs',),
    'dynamics': ('latent', 'action'),
    'reward': ('latent', 'action'),
    'pi': ('latent',),
    'q1': ('latent', 'action'),
    'q2': ('latent', 'action'),
}
COMPONENT_OUTPUTS = {
    'encoder': 'latent',
    'dynamics': 'latent',
    'reward': 'reward',
    'pi': 'action',
    'q1': 'q1.value',
    'q2': 'q2.value',
}
EXTERNAL_SPACES = ('obs', 'action')
FIXED_SPACES = ('obs', 'action', 'reward', 'q1.value', 'q2.value')
LABELS = {'encoder': 'Encoder', 'dynamics': 'Dynamics', 'reward': 'Reward', 'pi': 'Pi', 'q1': 'Q1', 'q2': 'Q2'}
SHORT_LABELS = {'encoder': 'Encoder', 'dynamics': 'Dyn', 'reward': 'Rew', 'pi': 'Pi', 'q1': 'Q1', 'q2': 'Q2'}


@dataclass
class Segment:
    space: str
    width: int
    block: int = 1


@dataclass
class LayerNode:
    name: str
    component: str
    kind: str
    inputs: list
    output: str
    out_width: int
    kernel_area: int = 1
    spatial: tuple = (1, 1)

    @property
    def in_width(self):
        return sum(seg.width * seg.block for seg in self.inputs)

    def params(self, widths=None):
        """Parameter count, optionally with some space widths replaced."""
        widths = widths or {}
        rows = widths.get(self.output, self.out_width)
        cols = sum(widths.get(seg.space, seg.width) * seg.block for seg in self.inputs)
        return rows * cols * self.kernel_area + rows

    def flops(self, widths=None):
        widths = widths or {}
        rows = widths.get(self.output, self.out_width)
        cols = sum(widths.get(seg.space, seg.width) * seg.block for seg in self.inputs)
        return 2 * self.kernel_area * rows * cols * self.spatial[0] * self.spatial[1]


@dataclass
class Member:
    tensor: str
    axis: int
    role: str
    offset: int = 0
    block: int = 1
    group_axis: int = 0


@dataclass
class Axis:
    spaces: tuple
    width: int


@dataclass
class PruningGroup:
    id: int
    kind: str
    component_tag: str
    axes: list
    members: list
    owned_layers: list
    param_count: int
    modules: int

    @property
    def prunable_width(self):
        return self.axes[0].width


@dataclass
class GroupManifest:
    groups: list
    total_params: int
    nodes: list = field(repr=False, default_factory=list)

    def __len__(self):
        return len(self.groups)

    def coupling_mask(self):
        return np.array([g.kind == 'coupling' for g in self.groups])

    def group_ids(self, component=None, kind=None):
        return [g.id for g in self.groups
                if (component is None or g.component_tag == component) and (kind is None or g.kind == kind)]


def connection_graph(model):
    """One node per layer, in model order, with the feature spaces it reads and writes."""
    widths = {'obs': model.obs_shape[0], 'action': model.action_dim}
    nodes = []
    spatial = model.obs_shape[1:] if len(model.obs_shape) == 3 else None
    for component in COMPONENTS:
        layers = model.components[component]
        previous = None
        for i, layer in enumerate(layers):
            name = '%s.%d' % (component, i)
            output = COMPONENT_OUTPUTS[component] if i == len(layers) - 1 else name
            if previous is None:
                inputs = [Segment(space, widths[space]) for space in COMPONENT_INPUTS[component]]
            else:
                block = 1
                if layer.kind == 'dense' and previous.kind == 'conv2d':
                    block = spatial[0] * spatial[1]
                inputs = [Segment(previous.output, previous.out_width, block)]
            if layer.kind == 'conv2d':
                spatial = layer.spatial_out(*spatial)
                node = LayerNode(name, component, 'conv2d', inputs, output, layer.out_features,
                                 kernel_area=layer.kernel_size ** 2, spatial=tuple(spatial))
            else:
                node = LayerNode(name, component, 'dense', inputs, output, layer.out_features)
            if node.in_width != layer.in_features:
                raise GraphError('layer %s reads %d features but its inputs provide %d.'
                                 % (name, layer.in_features, node.in_width))
            widths[output] = layer.out_features
            nodes.append(node)
            previous = node
    return nodes


def check_graph(nodes):
    produced = set(EXTERNAL_SPACES)
    widths = {}
    for node in nodes:
        for seg in node.inputs:
            if seg.space not in produced:
                raise GraphError('edge %s -> %s: space %r is consumed before it is produced.'
                                 % (seg.space, node.name, seg.space))
        if node.output in widths and widths[node.output] != node.out_width:
            raise GraphError('space %r is produced with widths %d and %d.'
                             % (node.output, widths[node.output], node.out_width))
        widths[node.output] = node.out_width
        produced.add(node.output)


def _label(components, short=False):
    labels = SHORT_LABELS if short else LABELS
    return [labels[c] for c in sorted(set(components), key=COMPONENTS.index)]


def build_groups(model):
    """Partition the model's parameters into pruning groups."""
    nodes = connection_graph(model)
    check_graph(nodes)
    producers = defaultdict(list)
    consumers = defaultdict(list)
    for node in nodes:
        producers[node.output].append(node)
        offset = 0
        for seg in node.inputs:
            consumers[seg.space].append((node, offset, seg.block))
            offset += seg.width * seg.block

    prunable = [space for space in producers if space not in FIXED_SPACES]
    interface = [space for space in prunable
                 if {n.component for n, _, _ in consumers[space]} - {n.component for n in producers[space]}]

    specific, coupled = [], OrderedDict()
    for space in prunable:
        if space in interface:
            continue
        node = producers[space][0]
        reads = tuple(seg.space for seg in node.inputs)
        if any(r in interface for r in reads):
            coupled.setdefault(reads, []).append(space)
        else:
            specific.append((COMPONENTS.index(node.component), nodes.index(node), space))

    axes_list = []
    for _, _, space in sorted(specific):
        axes_list.append(('component_specific', [(space,)]))
    signatures = sorted(coupled, key=lambda s: (len(s), s))
    coupling_axes = {sig: [tuple(coupled[sig])] for sig in signatures}
    for space in interface:
        readers = [sig for sig in signatures if space in sig]
        if readers:
            host = max(readers, key=lambda sig: (len(coupled[sig]), -signatures.index(sig)))
            coupling_axes[host].append((space,))
        else:
            sig = (space,)
            signatures.append(sig)
            coupling_axes[sig] = [(space,)]
    for sig in signatures:
        axes_list.append(('coupling', coupling_axes[sig]))

    widths = {node.output: node.out_width for node in nodes}
    groups = []
    owner = {}
    for gid, (kind, axes) in enumerate(axes_list, 1):
        for spaces in axes:
            for space in spaces:
                owner[space] = gid
    latent_group = owner.get('latent')
    for node in nodes:
        if node.output not in owner and latent_group is None:
            raise GraphError('layer %s writes a fixed space and no latent group exists to own it.' % node.name)

    for gid, (kind, axes) in enumerate(axes_list, 1):
        group_axes, members = [], []
        for k, spaces in enumerate(axes):
            space_widths = {widths[s] for s in spaces}
            if len(space_widths) != 1:
                raise GraphError('coupled spaces %s have unequal widths %s.' % (spaces, sorted(space_widths)))
            group_axes.append(Axis(tuple(spaces), space_widths.pop()))
            for space in spaces:
                for node in producers[space]:
                    members.append(Member(node.name + '.weight', 0, 'producer_row', group_axis=k))
                    members.append(Member(node.name + '.bias', 0, 'bias', group_axis=k))
                for node, offset, block in consumers[space]:
                    members.append(Member(node.name + '.weight', 1, 'consumer_column', offset, block, k))
        owned = [n.name for n in nodes if owner.get(n.output, latent_group) == gid]
        param_count = sum(n.params() for n in nodes if n.name in owned)
        spaces = [s for spaces in axes for s in spaces]
        if kind == 'component_specific':
            component = producers[spaces[0]][0].component
            tag = LABELS[component]
            modules = 1
        else:
            readers = {n.component for s in spaces if s not in interface for n in producers[s]}
            if not readers:
                readers = {n.component for s in spaces for n, _, _ in consumers[s]}
            sources = set()
            for s in spaces:
                for seg in producers[s][0].inputs if s not in interface else []:
                    sources.update(n.component for n in producers.get(seg.space, [])[:1])
            if not sources:
                sources = {producers[s][0].component for s in spaces}
            tag = ''.join(_label(sources)) + '-' + '.'.join(_label(readers, short=True))
            modules = 1 + len(readers - sources)
        groups.append(PruningGroup(gid, kind, tag, group_axes, members, owned, param_count, modules))

    total = model.param_count
    if sum(g.param_count for g in groups) != total:
        raise GraphError('group parameter counts sum to %d, model has %d.'
                         % (sum(g.param_count for g in groups), total))
    return GroupManifest(groups, total, nodes)


def check_manifest(model, manifest):
    if model.param_count != manifest.total_params:
        raise ManifestMismatchError('model has %d parameters, manifest describes %d.'
                                    % (model.param_count, manifest.total_params))
    widths = {node.output: node.out_width for node in connection_graph(model)}
    for group in manifest.groups:
        for axis in group.axes:
            for space in axis.spaces:
                if widths.get(space) != axis.width:
                    raise ManifestMismatchError('group %d expects %r of width %d, model has %s.'
                                                % (group.id, space, axis.width, widths.get(space)))


def _member_norms(array, member, width):
    if member.role == 'bias':
        return np.abs(array[:width].astype(np.float64))
    if member.role == 'producer_row':
        rows = array[:width].reshape(width, -1).astype(np.float64)
        return np.linalg.norm(rows, axis=1)
    cols = np.moveaxis(array, 1, 0)[member.offset:member.offset + width * member.block]
    return np.linalg.norm(cols.reshape(width, -1).astype(np.float64), axis=1)


def unit_norms(model, group, axis=0):
    tensors = model.named_tensors()
    width = group.axes[axis].width
    norms = np.zeros(width, dtype=np.float64)
    for member in group.members:
        if member.group_axis == axis:
            norms += _member_norms(tensors[member.tensor].data, member, width)
    return norms


def score_importance(model, group, axis=0):
    """Unit indices sorted by ascending aggregate L2 norm; ties keep the lower index first."""
    return np.argsort(unit_norms(model, group, axis), kind='stable')


def validate_coefficients(c, manifest):
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if len(c) != len(manifest.groups):
        raise ManifestMismatchError('coefficient vector has %d entries, manifest has %d groups.'
                                    % (len(c), len(manifest.groups)))
    if not np.all((c >= 0.0) & (c <= 1.0)):
        raise ConfigError('pruning coefficients must lie in [0, 1], got %s.' % np.round(c, 4).tolist())
    return c


def units_to_remove(c, width):
    return min(int(math.floor(c * width + 1e-9)), width - 1)


def pruned_widths(manifest, c):
    """Surviving width of every prunable space under coefficient vector ``c``."""
    c = validate_coefficients(c, manifest)
    widths = {}
    for coefficient, group in zip(c, manifest.groups):
        for axis in group.axes:
            for space in axis.spaces:
                widths[space] = axis.width - units_to_remove(coefficient, axis.width)
    return widths


def pruned_param_count(manifest, c):
    widths = pruned_widths(manifest, c)
    return sum(node.params(widths) for node in manifest.nodes)


def apply_pruning(model, manifest, c):
    """Return a pruned clone; the input model is never modified."""
    c = validate_coefficients(c, manifest)
    check_manifest(model, manifest)
    keep = {}
    for coefficient, group in zip(c, manifest.groups):
        for k, axis in enumerate(group.axes):
            ranking = score_importance(model, group, k)
            kept = np.sort(ranking[units_to_remove(coefficient, axis.width):])
            for space in axis.spaces:
                keep[space] = kept

    components = {name: [] for name in COMPONENTS}
    layers = dict(model.layers())
    for node in manifest.nodes:
        layer = layers[node.name]
        weight, bias = layer.weight.data, layer.bias.data
        if node.output in keep:
            weight, bias = weight[keep[node.output]], bias[keep[node.output]]
        columns, offset = [], 0
        for seg in node.inputs:
            units = keep.get(seg.space, np.arange(seg.width))
            columns.append((offset + units[:, None] * seg.block + np.arange(seg.block)[None, :]).reshape(-1))
            offset += seg.width * seg.block
        columns = np.concatenate(columns)
        if len(columns) != weight.shape[1] or np.any(columns != np.arange(weight.shape[1])):
            weight = np.take(weight, columns, axis=1)
        components[node.component].append(layer.copy(weight, bias))
    latent_keep = keep.get('latent', np.arange(model.latent_dim))
    return AgentModel(components, model.obs_shape, len(latent_keep), model.action_dim,
                      model.latent_index[latent_keep])


def sparsity_from_counts(before, after):
    if before <= 0:
        raise ValueError('parameter count before pruning must be positive.')
    return 1 - Fraction(after, before)


def measure_sparsity(before, after):
    return float(sparsity_from_counts(before.param_count, after.param_count))


# FLOPs

@dataclass
class FlopReport:
    per_component: dict
    per_forward: int
    per_planning_call: int
    params: int


def count_flops(model, planner=None):
    """Analytic FLOPs: dense 2*in*out, conv 2*k*k*in*out*H_out*W_out.

    ``per_forward`` runs every component once. A planning call encodes once,
    rolls ``horizon`` dynamics and reward steps for every sample and iteration,
    scores each trajectory with pi and both Q heads, and rolls the policy
    trajectories through pi and dynamics.
    """
    per_component = OrderedDict((name, 0) for name in COMPONENTS)
    for node in connection_graph(model):
        per_component[node.component] += node.flops()
    per_forward = sum(per_component.values())
    per_planning_call = per_forward
    if planner is not None:
        num_pi = min(planner.num_samples, int(round(planner.policy_fraction * planner.num_samples)))
        rollout = planner.horizon * (per_component['dynamics'] + per_component['reward'])
        terminal = per_component['pi'] + per_component['q1'] + per_component['q2']
        per_planning_call = per_component['encoder'] + \
            planner.iterations * planner.num_samples * (rollout + terminal) + \
            num_pi * planner.horizon * (per_component['pi'] + per_component['dynamics'])
    return FlopReport(per_component, per_forward, per_planning_call, model.param_count)


# manifest export

MANIFEST_FIELDS = ['group_type', 'component', 'group', 'modules', 'parameters']


def manifest_rows(manifest):
    return [{'group_type': g.kind, 'component': g.component_tag, 'group': g.id,
             'modules': g.modules, 'parameters': g.param_count} for g in manifest.groups]


def export_manifest_csv(manifest, path):
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(manifest_rows(manifest))
