import numpy as np
import numpy.testing as npt
import pytest
import torch

from semattn.config import RgbBranchConfig, SemanticBranchConfig
from semattn.errors import ShapeError
from semattn.rgb_branch import BasicBlock, RgbBranch
from semattn.rgb_branch import count_parameters as module_params
from semattn.semantic_branch import (
    SemanticBranch,
    conv_parameter_formula,
    count_parameters,
)


class TestRgbBranch:
    def test_residual18_shape(self):
        branch = RgbBranch(RgbBranchConfig())
        out = branch(torch.randn(1, 3, 224, 224))
        assert tuple(out.shape) == (1, 512, 7, 7)

    def test_residual18_parameter_count_near_12m(self):
        n = module_params(RgbBranch(RgbBranchConfig()))
        assert 12e6 * 0.85 <= n <= 12e6 * 1.15

    def test_tiny_residual_shape_via_adapter(self):
        branch = RgbBranch(RgbBranchConfig(backbone="tiny_residual"))
        assert branch.backbone.out_channels == 64  # 512 / 8 before projection
        assert branch.backbone.adapter is not None
        out = branch(torch.randn(2, 3, 224, 224))
        assert tuple(out.shape) == (2, 512, 7, 7)

    def test_residual50_shape(self):
        branch = RgbBranch(RgbBranchConfig(backbone="residual50"))
        out = branch(torch.randn(1, 3, 224, 224))
        assert tuple(out.shape) == (1, 512, 7, 7)
        assert branch.backbone.out_channels == 2048

    def test_wrong_channel_count_rejected(self):
        branch = RgbBranch(RgbBranchConfig(backbone="tiny_residual"))
        with pytest.raises(ShapeError):
            branch(torch.randn(1, 4, 224, 224))

    def test_zeroed_blocks_reduce_to_shortcuts(self):
        """With main conv weights zeroed, each block is relu(shortcut(x))."""
        torch.manual_seed(0)
        branch = RgbBranch(RgbBranchConfig(backbone="tiny_residual")).eval()
        backbone = branch.backbone
        with torch.no_grad():
            for m in backbone.stages.modules():
                if isinstance(m, BasicBlock):
                    m.conv1.weight.zero_()
                    m.conv2.weight.zero_()
        x = torch.randn(1, 3, 224, 224)
        with torch.no_grad():
            h = backbone.maxpool(torch.relu(backbone.bn1(backbone.conv1(x))))
            expected = h
            for stage in backbone.stages:
                for block in stage:
                    if block.downsample is None:
                        expected = torch.relu(expected)
                    else:
                        expected = torch.relu(block.downsample(expected))
            actual = backbone.maxpool(torch.relu(backbone.bn1(backbone.conv1(x))))
            for stage in backbone.stages:
                actual = stage(actual)
        npt.assert_allclose(actual.numpy(), expected.numpy(), atol=1e-6)

    def test_stage1_identity_with_zeroed_convs(self):
        torch.manual_seed(0)
        backbone = RgbBranch(RgbBranchConfig(backbone="tiny_residual")).backbone.eval()
        with torch.no_grad():
            for m in backbone.stages[0].modules():
                if isinstance(m, BasicBlock):
                    m.conv1.weight.zero_()
                    m.conv2.weight.zero_()
        h = torch.relu(torch.randn(1, backbone.stages[0][0].conv1.in_channels, 56, 56))
        with torch.no_grad():
            out = backbone.stages[0](h)
        npt.assert_allclose(out.numpy(), h.numpy(), atol=1e-6)


class TestExternalImport:
    def test_torchvision_layout_round_trip(self):
        torch.manual_seed(0)
        from semattn.rgb_branch import external_key_map, load_external_backbone

        source = RgbBranch(RgbBranchConfig())
        # export under the external naming, as a torchvision-style dict
        exported = {}
        for key, value in source.state_dict().items():
            assert key.startswith("backbone.")
            name = key[len("backbone."):]
            if name.startswith("stages."):
                stage, rest = name[len("stages."):].split(".", 1)
                name = f"layer{int(stage) + 1}.{rest}"
            exported[name] = value.clone()
        exported["fc.weight"] = torch.zeros(1000, 512)
        exported["fc.bias"] = torch.zeros(1000)

        target = RgbBranch(RgbBranchConfig())
        skipped = load_external_backbone(target, exported)
        assert skipped == ["fc.weight", "fc.bias"]
        x = torch.randn(1, 3, 224, 224)
        source.eval(), target.eval()
        with torch.no_grad():
            npt.assert_array_equal(source(x).numpy(), target(x).numpy())
        assert external_key_map("layer3.1.conv2.weight") == "backbone.stages.2.1.conv2.weight"
        assert external_key_map("fc.weight") is None


class TestSemanticBranch:
    def test_conv4_shape_for_150_classes(self):
        branch = SemanticBranch(SemanticBranchConfig(num_semantic_classes=150))
        out = branch(torch.randn(1, 150, 224, 224))
        assert tuple(out.shape) == (1, 512, 7, 7)

    def test_zero_input_gives_zero_output(self):
        branch = SemanticBranch(SemanticBranchConfig(num_semantic_classes=9)).eval()
        out = branch(torch.zeros(1, 9, 224, 224))
        assert torch.count_nonzero(out) == 0

    def test_wrong_channels_rejected(self):
        branch = SemanticBranch(SemanticBranchConfig(num_semantic_classes=9))
        with pytest.raises(ShapeError):
            branch(torch.randn(1, 12, 224, 224))

    @pytest.mark.parametrize("backbone", ["conv4", "conv3", "resnet18_style"])
    def test_output_dims_invariant_across_backbones(self, backbone):
        cfg = SemanticBranchConfig(backbone=backbone, num_semantic_classes=13)
        out = SemanticBranch(cfg)(torch.randn(1, 13, 224, 224))
        assert tuple(out.shape) == (1, 512, 7, 7)

    def test_conv4_parameter_budget(self):
        n = count_parameters(SemanticBranchConfig(num_semantic_classes=150))
        assert 2.6e6 * 0.85 <= n <= 2.6e6 * 1.15

    def test_conv3_parameter_budget(self):
        cfg = SemanticBranchConfig(backbone="conv3", num_semantic_classes=150)
        n = count_parameters(cfg)
        assert 6.5e6 * 0.85 <= n <= 6.5e6 * 1.15

    def test_count_matches_closed_form(self):
        for backbone in ("conv4", "conv3"):
            for cham in (False, True):
                cfg = SemanticBranchConfig(
                    backbone=backbone, use_cham=cham, num_semantic_classes=77
                )
                assert count_parameters(cfg) == conv_parameter_formula(cfg)

    def test_doubling_channels_roughly_quadruples_conv_params(self):
        base = SemanticBranchConfig(num_semantic_classes=150, use_cham=False)
        doubled = SemanticBranchConfig(
            num_semantic_classes=150,
            use_cham=False,
            channel_plan=tuple(2 * c for c in base.resolved_channel_plan()),
        )

        def conv_only(cfg):
            total, in_ch = 0, cfg.num_semantic_classes
            for c in cfg.resolved_channel_plan():
                total += 9 * in_ch * c
                in_ch = c
            return total

        ratio = conv_only(doubled) / conv_only(base)
        assert 3.5 <= ratio <= 4.0

    def test_forced_identity_gates_match_no_cham_network(self):
        torch.manual_seed(3)
        with_cham = SemanticBranch(
            SemanticBranchConfig(num_semantic_classes=6, use_cham=True)
        ).eval()
        without = SemanticBranch(
            SemanticBranchConfig(num_semantic_classes=6, use_cham=False)
        ).eval()
        with torch.no_grad():
            for a, b in zip(without.blocks, with_cham.blocks):
                a.conv.weight.copy_(b.conv.weight)
                a.bn.weight.copy_(b.bn.weight)
                a.bn.bias.copy_(b.bn.bias)
        for gate in with_cham.gates:
            gate._bypass = True
        x = torch.randn(1, 6, 224, 224)
        with torch.no_grad():
            npt.assert_allclose(
                with_cham(x).numpy(), without(x).numpy(), rtol=1e-5, atol=1e-6
            )

    def test_cham_gates_sit_after_all_but_last_block(self):
        cfg = SemanticBranchConfig(num_semantic_classes=10, use_cham=True)
        branch = SemanticBranch(cfg)
        assert len(branch.gates) == 3  # conv4: gates after blocks 1..3
        cfg3 = SemanticBranchConfig(
            backbone="conv3", num_semantic_classes=10, use_cham=True
        )
        assert len(SemanticBranch(cfg3).gates) == 2
