"""实例服务测试"""
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from app.models.geometry import Disk, Point
from app.models.instance import Distribution, GenConfig, Instance, RadiusConfig, RadiusKind
from app.services.geometry import tour_length
from app.services.instance_service import (
    InstanceFileService,
    augment8,
    format_instance,
    generate,
    generate_batch,
    normalize,
    parse_instance,
    radius_for_size,
    restore_points,
)
from app.utils.errors import ConfigurationError, InstanceFormatError


def _lines(text: str):
    return [(i, line.strip()) for i, line in enumerate(text.splitlines(), start=1) if line.strip()]


class TestGeneration:
    """实例生成测试"""

    @pytest.mark.parametrize("distribution", list(Distribution))
    def test_centers_in_unit_square(self, distribution):
        """测试三种分布的圆心都在单位正方形内"""
        cfg = GenConfig(distribution=distribution, seed=7)
        for inst in generate_batch(cfg, 30, 5):
            centers = inst.centers()
            assert inst.n == 30
            assert np.all(centers >= 0.0) and np.all(centers <= 1.0)

    def test_random_radii_range(self):
        """测试随机半径落在 [0, 0.1)"""
        inst = generate(GenConfig(radius=RadiusConfig.preset("random"), seed=3), 200)
        radii = inst.radii()[1:]
        assert np.all(radii >= 0.0) and np.all(radii < 0.1)

    def test_constant_radius(self):
        """测试固定半径按规模映射"""
        inst = generate(GenConfig(radius=RadiusConfig(kind=RadiusKind.CONSTANT)), 40)
        assert all(d.radius == 0.05 for d in inst.targets)

    def test_radius_for_unlisted_size(self):
        """测试未收录规模取最近规模，距离相同取较小者"""
        assert radius_for_size(10) == 0.1
        assert radius_for_size(30) == 0.1
        assert radius_for_size(70) == 0.05
        assert radius_for_size(1000) == 0.01

    def test_radius_for_invalid_size(self):
        """测试非法规模"""
        with pytest.raises(ConfigurationError):
            radius_for_size(0)

    def test_deterministic(self):
        """测试同一种子与序号得到相同实例"""
        cfg = GenConfig(seed=11)
        assert generate(cfg, 15, index=4) == generate(cfg, 15, index=4)
        assert generate(cfg, 15, index=4) != generate(cfg, 15, index=5)

    def test_batch_independent_of_start(self):
        """测试批量生成中每个实例只依赖自身序号"""
        cfg = GenConfig(seed=2)
        batch = generate_batch(cfg, 10, 6)
        assert batch[3:] == generate_batch(cfg, 10, 3, start_index=3)


class TestAugmentation:
    """对称增强测试"""

    def test_eight_instances(self):
        """测试生成 8 个实例且第 0 个为原实例，半径不变"""
        inst = generate(GenConfig(seed=5), 10)
        augmented = augment8(inst)
        assert len(augmented) == 8
        assert augmented[0] == inst
        for aug in augmented:
            assert [d.radius for d in aug.targets] == [d.radius for d in inst.targets]

    def test_restore_points(self):
        """测试增强实例上的航点映射回原坐标系"""
        inst = generate(GenConfig(seed=5), 10)
        for k, aug in enumerate(augment8(inst)):
            restored = restore_points([d.center for d in aug.targets], k)
            for p, d in zip(restored, inst.targets):
                assert p.x == pytest.approx(d.center.x)
                assert p.y == pytest.approx(d.center.y)

    def test_tour_length_preserved(self):
        """测试同一访问顺序在各增强实例上长度相同"""
        inst = generate(GenConfig(seed=9), 12)
        base = tour_length([inst.depot] + [d.center for d in inst.targets])
        for aug in augment8(inst):
            assert tour_length([aug.depot] + [d.center for d in aug.targets]) == pytest.approx(base, abs=1e-9)

    def test_outside_unit_square_rejected(self):
        """测试未归一化实例不能增强"""
        inst = Instance(depot=Point(0, 0), targets=(Disk(Point(5, 5), 1.0),))
        with pytest.raises(ConfigurationError):
            augment8(inst)


class TestNormalize:
    """归一化测试"""

    def test_unit_instance_unchanged(self):
        """测试单位正方形内的实例原样返回"""
        inst = generate(GenConfig(seed=1), 8)
        normalized, scale, offset = normalize(inst)
        assert normalized == inst
        assert scale == 1.0
        assert offset == Point(0.0, 0.0)

    def test_scaling(self):
        """测试坐标与半径按包围盒长边缩放"""
        inst = Instance(depot=Point(10, 10), targets=(Disk(Point(30, 20), 2.0), Disk(Point(20, 15), 1.0)))
        normalized, scale, offset = normalize(inst)
        assert scale == 20.0
        assert offset == Point(10.0, 10.0)
        assert normalized.depot == Point(0.0, 0.0)
        assert normalized.targets[0].center == Point(1.0, 0.5)
        assert normalized.targets[0].radius == pytest.approx(0.1)

    def test_degenerate(self):
        """测试所有点重合时报错"""
        inst = Instance(depot=Point(3, 3), targets=(Disk(Point(3, 3), 1.0),))
        with pytest.raises(ConfigurationError):
            normalize(inst)


class TestInstanceFile:
    """实例文件读写测试"""

    @pytest.fixture
    def temp_dir(self):
        """创建临时目录"""
        temp_dir = tempfile.mkdtemp()
        yield temp_dir
        shutil.rmtree(temp_dir)

    @pytest.fixture
    def file_service(self, temp_dir):
        """创建实例存储服务"""
        return InstanceFileService(base_path=temp_dir)

    def test_save_and_load(self, file_service):
        """测试保存后读取得到逐位相同的实例"""
        inst = generate(GenConfig(radius=RadiusConfig.preset("random"), seed=21), 20)
        path = file_service.save("n20.cetsp", inst)
        assert path.exists()
        loaded = file_service.load("n20.cetsp")
        assert loaded == inst
        assert loaded.id == "n20"

    def test_format_header(self):
        """测试文件头与仓库行"""
        inst = Instance(depot=Point(0.5, 0.25), targets=(Disk(Point(0.1, 0.2), 0.05),))
        lines = format_instance(inst).splitlines()
        assert lines[0] == "CETSP 1 1"
        assert lines[1] == "0.5 0.25 0"

    @pytest.mark.parametrize("text, message", [
        ("", "empty file"),
        ("TSP 1 2\n0 0 0\n", "malformed header"),
        ("CETSP 2 1\n0 0 0\n1 1 0.1\n", "unsupported version"),
        ("CETSP 1 x\n0 0 0\n", "not an integer"),
        ("CETSP 1 1\n", "missing depot line"),
        ("CETSP 1 1\n0 0 0.5\n1 1 0.1\n", "depot radius must be 0"),
        ("CETSP 1 1\n0 0 0\n1 1\n", "must have 3 fields"),
        ("CETSP 1 1\n0 0 0\n1 1 -0.1\n", "radius < 0"),
        ("CETSP 1 1\n0 0 0\n1 abc 0.1\n", "non-numeric"),
        ("CETSP 1 2\n0 0 0\n1 1 0.1\n", "count mismatch"),
    ])
    def test_format_errors(self, text, message):
        """测试各类格式错误的诊断信息"""
        with pytest.raises(InstanceFormatError, match=message):
            parse_instance(_lines(text))

    @pytest.mark.parametrize("text, message", [
        ("CETSP 1 1\n0.5 0.5 0\nabc 0.5 0.1\n", "non-numeric field 'abc' at line 3"),
        ("CETSP 1 1\n0.5 0.5 0\nnan 0.5 0.1\n", "non-finite field 'nan' at line 3"),
        ("CETSP 1 1\n0.5 0.5 0\ninf 0.5 0.1\n", "non-finite field 'inf' at line 3"),
        ("CETSP 1 1\nabc 0.5 0\n1 1 0.1\n", "non-numeric field 'abc' at line 2"),
        ("CETSP 1 1\nnan 0.5 0\n1 1 0.1\n", "non-finite field 'nan' at line 2"),
    ])
    def test_leading_word_is_field_error(self, text, message):
        """测试行首为单词的目标/仓库行按字段错误报告，并给出行号"""
        with pytest.raises(InstanceFormatError, match=message):
            parse_instance(_lines(text))

    def test_dynamic_keyword_ends_instance_section(self):
        """测试只有 DYNAMIC 关键字结束实例段"""
        with pytest.raises(InstanceFormatError, match="missing depot line"):
            parse_instance(_lines("CETSP 1 1\nDYNAMIC 0\n"))
        inst, rest = parse_instance(_lines("CETSP 1 1\n0 0 0\n1 1 0.1\nDYNAMIC 0\n"))
        assert inst.n == 1
        assert rest[0][1] == "DYNAMIC 0"

    def test_trailing_content_rejected(self, file_service, temp_dir):
        """测试实例文件不能带额外段"""
        path = Path(temp_dir) / "extra.cetsp"
        path.write_text("CETSP 1 1\n0 0 0\n1 1 0.1\nDYNAMIC 0\n", encoding="utf-8")
        with pytest.raises(InstanceFormatError, match="unexpected content"):
            file_service.load(path)

    def test_missing_file(self, file_service):
        """测试文件不存在"""
        with pytest.raises(FileNotFoundError):
            file_service.load("nope.cetsp")

    def test_import_benchmark(self, file_service, temp_dir):
        """测试导入 4 列基准文件：跳过非数字行，第一行为仓库并归一化"""
        path = Path(temp_dir) / "bench.txt"
        path.write_text("x y z r\n0 0 0 0\n100 0 0 10\n50 50 0 5\n", encoding="utf-8")
        inst, scale, offset = file_service.import_benchmark(path)
        assert inst.n == 2
        assert scale == 100.0
        assert offset == Point(0.0, 0.0)
        assert inst.targets[0].center == Point(1.0, 0.0)
        assert inst.targets[0].radius == pytest.approx(0.1)
