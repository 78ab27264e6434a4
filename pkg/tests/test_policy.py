"""策略网络测试"""
import numpy as np
import pytest
import torch

from app.component.diffcore import grad_check
from app.component.env import discretize, feasible_mask, replay, reset, step
from app.component.policy import CETSPPolicy, knn_indices, knn_table
from app.models.configs import DecodeMode, EncoderVariant, FFKind, PolicyConfig
from app.models.geometry import Disk, Point
from app.models.instance import GenConfig, Instance, RadiusConfig
from app.services.geometry import tour_length
from app.services.instance_service import generate, generate_batch
from app.utils.errors import ConfigurationError
from app.utils.helpers import torch_generator

MICRO = dict(layers=1, dim=16, heads=2, gamma=4, k_nn=3, seed=0)


@pytest.fixture
def policy():
    """微型策略网络"""
    return CETSPPolicy(PolicyConfig(**MICRO))


@pytest.fixture
def batch():
    """6 个 n=7 的随机半径实例"""
    return generate_batch(GenConfig(radius=RadiusConfig.preset("random"), seed=17), 7, 6)


class TestKNN:
    """近邻表测试"""

    def test_order_and_self_excluded(self):
        """测试按距离排序、不含自身、仓库可入选"""
        inst = Instance(
            depot=Point(0.0, 0.0),
            targets=(Disk(Point(0.1, 0.0), 0.01), Disk(Point(0.5, 0.0), 0.01), Disk(Point(0.3, 0.0), 0.01)),
        )
        assert knn_indices(inst, 1, 2) == [0, 3]
        assert knn_indices(inst, 2, 3) == [3, 1, 0]

    def test_tie_prefers_smaller_index(self):
        """测试距离相同时下标小者优先"""
        inst = Instance(
            depot=Point(0.5, 0.5),
            targets=(Disk(Point(0.75, 0.5), 0.01), Disk(Point(0.25, 0.5), 0.01)),
        )
        assert knn_indices(inst, 0, 2) == [1, 2]

    def test_invalid_k(self):
        """测试 k 越界"""
        inst = generate(GenConfig(seed=1), 3)
        with pytest.raises(ConfigurationError):
            knn_indices(inst, 1, 0)
        with pytest.raises(ConfigurationError):
            knn_indices(inst, 1, 4)

    def test_table_shape(self):
        """测试近邻表形状"""
        inst = generate(GenConfig(seed=1), 6)
        table = knn_table(inst, 3)
        assert table.shape == (7, 3)
        assert all(i not in table[i] for i in range(7))


class TestDecoderDistributions:
    """解码器分布测试"""

    def test_node_distribution_masked(self, policy):
        """测试节点分布归一且屏蔽位置概率为 0"""
        inst = generate(GenConfig(seed=3), 6)
        emb = policy.encode(inst)
        mask = np.array([False, True, False, True, True, False, True])
        probs = policy.node_decode_step(emb, 0, mask)
        assert probs.shape == (7,)
        assert probs.sum().item() == pytest.approx(1.0)
        assert torch.all(probs[torch.as_tensor(~mask)] == 0.0)

    def test_loc_distribution(self, policy):
        """测试航点分布归一、长度为 γ"""
        inst = generate(GenConfig(seed=3), 6)
        emb = policy.encode(inst)
        probs = policy.loc_decode_step(emb, 2, Point(0.3, 0.3))
        assert probs.shape == (4,)
        assert probs.sum().item() == pytest.approx(1.0)
        assert torch.all(probs > 0)

    def test_loc_rejects_depot(self, policy):
        """测试 loc-decoder 不接受仓库"""
        emb = policy.encode(generate(GenConfig(seed=3), 6))
        with pytest.raises(ConfigurationError):
            policy.loc_decode_step(emb, 0, Point(0.3, 0.3))

    def test_encode_mixed_sizes(self, policy):
        """测试同批实例规模必须一致"""
        with pytest.raises(ConfigurationError):
            policy.encode([generate(GenConfig(seed=1), 5), generate(GenConfig(seed=1), 6)])


class TestRollout:
    """rollout 测试"""

    def test_sample_rollout_feasible(self, policy, batch):
        """测试采样轨迹全部结束、覆盖全部目标且长度与几何重算一致"""
        dinsts = [discretize(inst, 4) for inst in batch]
        traj = policy.rollout(dinsts, DecodeMode.SAMPLE, generator=torch_generator(5))
        assert traj.env.all_done
        assert traj.grouped_rewards().shape == (6, 7)
        lengths = traj.lengths()
        for r in range(traj.env.rows):
            state = traj.state(r)
            assert state.covered.all()
            assert tour_length(state.waypoints, closed=False) == pytest.approx(lengths[r], abs=1e-9)
        assert torch.allclose(traj.rewards, -torch.as_tensor(lengths, dtype=traj.rewards.dtype))

    def test_multistart_second_nodes_distinct(self, policy, batch):
        """测试多起点的第二节点互不相同"""
        dinsts = [discretize(inst, 4) for inst in batch]
        traj = policy.rollout(dinsts, DecodeMode.SAMPLE, generator=torch_generator(5))
        assert traj.multistart_violations() == 0
        second = traj.env.second_nodes().reshape(6, 7)
        for b in range(6):
            if not traj.env.duplicate_start.reshape(6, 7)[b].any():
                assert len(set(second[b].tolist())) == 7

    def test_log_probs_differentiable(self, policy, batch):
        """测试轨迹对数概率可反向传播到参数"""
        dinsts = [discretize(inst, 4) for inst in batch[:2]]
        traj = policy.rollout(dinsts, DecodeMode.SAMPLE, generator=torch_generator(1))
        assert torch.all(traj.log_probs <= 0)
        traj.log_probs.sum().backward()
        assert policy.params["node.W_Qg"].grad is not None
        assert policy.params["loc.W_f3"].grad is not None

    def test_greedy_deterministic(self, policy, batch):
        """测试贪心解码可复现"""
        dinsts = [discretize(inst, 4) for inst in batch]
        first = policy.rollout(dinsts, DecodeMode.GREEDY).lengths()
        second = policy.rollout(dinsts, DecodeMode.GREEDY).lengths()
        assert np.array_equal(first, second)

    def test_teacher_forcing_reproduces_log_probs(self, policy, batch):
        """测试给定动作重放得到相同的轨迹与对数概率"""
        dinsts = [discretize(inst, 4) for inst in batch[:2]]
        traj = policy.rollout(dinsts, DecodeMode.SAMPLE, generator=torch_generator(2))
        actions = [traj.state(r).actions() for r in range(traj.env.rows)]
        forced = policy.rollout(dinsts, DecodeMode.GREEDY, actions=actions)
        assert np.allclose(forced.lengths(), traj.lengths())
        assert torch.allclose(forced.log_probs, traj.log_probs)

    def test_gamma_mismatch(self, policy, batch):
        """测试离散化精度与策略配置不一致"""
        with pytest.raises(ConfigurationError):
            policy.rollout([discretize(batch[0], 8)], DecodeMode.GREEDY)

    @pytest.mark.parametrize("overrides", [
        {"encoder_variant": EncoderVariant.ORIGINAL},
        {"ff_kind": FFKind.SWIGLU},
        {"use_knn": False},
    ])
    def test_variants(self, batch, overrides):
        """测试编码器/前馈层/近邻交互的各变体都能完成解码"""
        policy = CETSPPolicy(PolicyConfig(**MICRO, **overrides))
        traj = policy.rollout([discretize(inst, 4) for inst in batch[:2]], DecodeMode.GREEDY)
        assert traj.env.all_done
        assert np.all(traj.lengths() > 0)


class TestSolve:
    """推理测试"""

    def test_route_replays(self, policy):
        """测试求得的路线可在环境中重放且长度一致"""
        inst = generate(GenConfig(seed=8), 8)
        solution = policy.solve(inst)
        assert solution.route.length == pytest.approx(solution.length, abs=1e-9)
        state = replay(discretize(inst, 4), solution.route.actions())
        assert state.done and state.covered.all()
        assert state.length_so_far == pytest.approx(solution.length, abs=1e-9)

    def test_augmentation_never_worse(self, policy):
        """测试 ×8 增强的结果不差于不增强"""
        for index in range(3):
            inst = generate(GenConfig(seed=8), 8, index=index)
            plain = policy.solve(inst)
            augmented = policy.solve(inst, aug=True)
            assert augmented.length <= plain.length
            assert augmented.route.length == pytest.approx(augmented.length, abs=1e-9)

    def test_shared_params_variant(self, policy):
        """测试共享参数的变体与原模型使用同一组张量"""
        variant = CETSPPolicy(policy.config.model_copy(update={"use_knn": False}), params=policy.params)
        assert variant.params["loc.W_Kl"] is policy.params["loc.W_Kl"]
        assert variant.solve(generate(GenConfig(seed=8), 6)).length > 0


class TestEncoderInvariants:
    """编码器与兼容层的结构性质测试"""

    @pytest.mark.parametrize("variant", [EncoderVariant.ADAPTED, EncoderVariant.ORIGINAL])
    def test_permutation_equivariant(self, variant):
        """测试目标重排后节点嵌入随之重排，仓库嵌入不变"""
        policy = CETSPPolicy(PolicyConfig(**MICRO, encoder_variant=variant))
        inst = generate(GenConfig(radius=RadiusConfig.preset("random"), seed=5), 6)
        perm = [3, 0, 5, 1, 4, 2]
        permuted = Instance(depot=inst.depot, targets=tuple(inst.targets[j] for j in perm))
        with torch.no_grad():
            base = policy.encode(inst).nodes[0]
            moved = policy.encode(permuted).nodes[0]
        torch.testing.assert_close(moved[0], base[0], rtol=0.0, atol=1e-10)
        for j, source in enumerate(perm):
            torch.testing.assert_close(moved[j + 1], base[source + 1], rtol=0.0, atol=1e-10)

    def test_identical_targets_identical_embeddings(self, policy):
        """测试相同的目标得到相同的嵌入"""
        inst = Instance(
            depot=Point(0.5, 0.5),
            targets=(Disk(Point(0.2, 0.3), 0.05), Disk(Point(0.8, 0.1), 0.1), Disk(Point(0.2, 0.3), 0.05)),
        )
        with torch.no_grad():
            nodes = policy.encode(inst).nodes[0]
        torch.testing.assert_close(nodes[1], nodes[3], rtol=0.0, atol=1e-12)
        assert not torch.allclose(nodes[1], nodes[2])

    def test_graph_embedding_is_node_mean(self, policy, batch):
        """测试图嵌入等于节点嵌入的算术平均"""
        with torch.no_grad():
            emb = policy.encode(batch[:3])
        assert emb.graph.shape == (3, MICRO["dim"])
        for b in range(3):
            torch.testing.assert_close(emb.graph[b], emb.nodes[b].sum(dim=0) / emb.nodes.shape[1])

    def test_node_logits_clipped(self, policy):
        """测试放大投影权重后节点 logits 仍在 [−C, C] 内"""
        with torch.no_grad():
            for name in ("node.W_Qg", "node.W_Ql", "node.W_Kc"):
                policy.params[name].mul_(100.0)
        inst = generate(GenConfig(seed=3), 6)
        mask = torch.ones(1, inst.n + 1, dtype=torch.bool)
        mask[0, 0] = False
        with torch.no_grad():
            ctx = policy.context(policy.encode(inst), 1)
            _, logits = policy.node_log_probs(ctx, torch.tensor([0]), mask, return_logits=True)
        clip = policy.config.clip
        assert torch.all(logits.abs() <= clip)
        assert logits.abs().max().item() > 0.9 * clip


class TestTrajectoryProbability:
    """轨迹概率分解测试"""

    def test_total_is_sum_of_steps(self, policy, batch):
        """测试轨迹对数概率等于逐步对数概率之和，概率等于逐步概率之积"""
        dinsts = [discretize(inst, 4) for inst in batch[:2]]
        with torch.no_grad():
            traj = policy.rollout(dinsts, DecodeMode.SAMPLE, generator=torch_generator(4))
        steps = torch.stack(traj.node_log_probs + traj.loc_log_probs)
        torch.testing.assert_close(traj.log_probs, steps.sum(dim=0))
        torch.testing.assert_close(torch.exp(traj.log_probs), torch.exp(steps).prod(dim=0))

    def test_product_of_single_step_probabilities(self, policy):
        """测试逐步单独计算的节点/航点概率之积等于 rollout 给出的轨迹概率"""
        inst = generate(GenConfig(radius=RadiusConfig.preset("random"), seed=11), 6)
        dinst = discretize(inst, 4)
        with torch.no_grad():
            traj = policy.rollout([dinst], DecodeMode.SAMPLE, n_starts=1, generator=torch_generator(9))
            emb = policy.encode(inst)
            state = reset(dinst, 1)[0]
            product = 1.0
            for t, action in enumerate(traj.state(0).actions()):
                if t > 0:
                    node_probs = policy.node_decode_step(emb, state.last_node, feasible_mask(state))
                    product *= node_probs[action.node].item()
                if action.node != 0:
                    loc_probs = policy.loc_decode_step(emb, action.node, state.last_point)
                    product *= loc_probs[action.waypoint_index].item()
                state = step(state, action, dinst)
        assert state.done
        assert product == pytest.approx(torch.exp(traj.log_probs[0]).item(), rel=1e-9)


def _decoder_objective(policy: CETSPPolicy, inst: Instance, weights) -> torch.Tensor:
    """编码 + node-decoder + loc-decoder 的加权对数概率，用于梯度检查"""
    ctx = policy.context(policy.encode(inst), 1)
    mask = torch.ones(1, inst.n + 1, dtype=torch.bool)
    mask[0, 0] = False
    node_lp = policy.node_log_probs(ctx, torch.tensor([0]), mask)[:, 1:]
    prev = torch.tensor([[0.3, 0.4]], dtype=policy.dtype)
    loc_lp = policy.loc_log_probs(ctx, torch.tensor([0]), torch.tensor([2]), prev)
    return (node_lp * weights[0]).sum() + (loc_lp * weights[1]).sum()


class TestPolicyGradients:
    """策略网络整体的有限差分梯度检查"""

    @pytest.mark.parametrize("prefix", ["enc.", "node.", "loc."])
    @pytest.mark.parametrize("use_knn", [True, False])
    def test_grad_check_through_network(self, prefix, use_knn):
        """测试编码器、node-decoder、loc-decoder 各部分参数的解析梯度与中心差分一致"""
        policy = CETSPPolicy(PolicyConfig(**MICRO, use_knn=use_knn))
        inst = generate(GenConfig(radius=RadiusConfig.preset("random"), seed=21), 5)
        rng = torch_generator(3)
        weights = (torch.rand(1, inst.n, generator=rng, dtype=policy.dtype),
                   torch.rand(1, MICRO["gamma"], generator=rng, dtype=policy.dtype))
        params = [policy.params[name] for name in policy.params.names() if name.startswith(prefix)]
        assert params
        err = grad_check(lambda: _decoder_objective(policy, inst, weights), params, max_coords=80)
        assert err < 1e-4
