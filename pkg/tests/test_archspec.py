import pytest
import torch

from bottlemask.archspec import (
    ArchParseError,
    ShapeInferenceError,
    build_network,
    infer_shapes,
    parse_architecture,
    unparse,
)

CLASSIFIER_28 = (
    "C(1,1,4) -> C(3,2,4) -> C(1,1,8) -> C(3,2,8) -> C(1,1,16) -> "
    "C(3,2,16) -> Avg -> FC(2)"
)
MASK_28 = (
    "[C(1,1,4) -> C(3,2,4) -> C(1,1,8) -> C(3,2,8)] -> "
    "[Resize(12) -> C(1,1,16) -> Pad(1) -> Resize(28) -> C(1,1,16) -> C(1,1,1)]"
)


class TestParse:
    def test_basic_tokens(self):
        spec = parse_architecture("C(3,2,8) -> Avg -> FC(2)")
        kinds = [l.kind for l in spec.layers]
        assert kinds == ["conv", "avg_pool", "fully_connected"]
        conv = spec.layers[0]
        assert (conv.kernel, conv.stride, conv.out_channels) == (3, 2, 8)
        assert conv.padding_mode == "valid"
        assert spec.layers[2].target == (2,)

    def test_empty_string_is_identity_network(self):
        spec = parse_architecture("")
        assert spec.layers == ()
        shaped = infer_shapes(spec, (5, 5, 2))
        assert shaped.output_shape == (5, 5, 2)
        net = build_network(shaped, 0)
        x = torch.rand(1, 2, 5, 5)
        assert torch.equal(net(x), x)

    def test_published_classifier_string(self):
        spec = parse_architecture(CLASSIFIER_28)
        assert len(spec.layers) == 8
        assert spec.layers[-1].kind == "fully_connected"
        assert spec.layers[-1].target == (2,)

    def test_same_padding_subscript(self):
        spec = parse_architecture("C_s(3,2,4) -> T_s(3,2,8)")
        assert spec.layers[0].padding_mode == "same"
        assert spec.layers[1].padding_mode == "same"
        assert spec.layers[1].kind == "transpose_conv"

    def test_unknown_token_rejected_with_position(self):
        with pytest.raises(ArchParseError, match="position 1"):
            parse_architecture("C(3,2,8) -> Foo(2)")

    def test_wrong_arity_rejected(self):
        with pytest.raises(ArchParseError, match="3 integer"):
            parse_architecture("C(3,2)")

    def test_whitespace_separated_args_accepted(self):
        # a known typo in published material: missing comma between ints
        spec = parse_architecture("C_s(3, 1 8)")
        layer = spec.layers[0]
        assert (layer.kernel, layer.stride, layer.out_channels) == (3, 1, 8)
        assert layer.padding_mode == "same"

    def test_segment_nonlinearities(self):
        spec = parse_architecture(MASK_28, ("relu6", "leaky_relu"))
        assert spec.segments == (4, 6)
        assert {l.nonlinearity for l in spec.layers[:4]} == {"relu6"}
        assert {l.nonlinearity for l in spec.layers[4:]} == {"leaky_relu"}

    def test_bad_nonlinearity_plan(self):
        with pytest.raises(ArchParseError):
            parse_architecture(MASK_28, ("relu6",) * 3)
        with pytest.raises(ArchParseError):
            parse_architecture("C(1,1,1)", "swish")

    def test_bare_tokens_next_to_segments_rejected(self):
        with pytest.raises(ArchParseError):
            parse_architecture("[C(1,1,4)] -> C(3,2,4)")

    def test_unparse_round_trips(self):
        for text, plan in ((CLASSIFIER_28, "relu6"), (MASK_28, ("relu6", "leaky_relu"))):
            spec = parse_architecture(text, plan)
            again = parse_architecture(unparse(spec), plan)
            assert again.layers == spec.layers
            assert again.segments == spec.segments


class TestShapes:
    def test_valid_conv_formula(self):
        spec = infer_shapes(parse_architecture("C(3,2,4)"), (28, 28, 1))
        assert spec.output_shape == (13, 13, 4)  # floor((28-3)/2)+1

    def test_same_conv_formula(self):
        spec = infer_shapes(parse_architecture("C_s(3,2,4)"), (28, 28, 1))
        assert spec.output_shape == (14, 14, 4)  # ceil(28/2)

    def test_avg_collapses_to_channel_vector(self):
        spec = infer_shapes(parse_architecture("Avg"), (7, 7, 16))
        assert spec.output_shape == (16,)

    def test_transpose_inverts_same_formula(self):
        spec = infer_shapes(parse_architecture("T_s(3,2,16)"), (7, 7, 1))
        assert spec.output_shape == (14, 14, 16)
        spec = infer_shapes(parse_architecture("T(3,2,16)"), (7, 7, 1))
        assert spec.output_shape == (15, 15, 16)  # (7-1)*2 + 3

    def test_pad_and_resize(self):
        spec = infer_shapes(parse_architecture("Resize(12) -> Pad(1)"), (6, 6, 8))
        assert spec.shapes == ((12, 12, 8), (14, 14, 8))

    def test_reshape_from_vector(self):
        spec = infer_shapes(parse_architecture("FC(49) -> Shape(7,7)"), (24,))
        assert spec.output_shape == (7, 7, 1)

    def test_published_mask_string_traces_to_mask_map(self):
        spec = infer_shapes(parse_architecture(MASK_28, ("relu6", "leaky_relu")), (28, 28, 1))
        assert spec.output_shape == (28, 28, 1)

    def test_nonpositive_intermediate_names_layer(self):
        with pytest.raises(ShapeInferenceError, match="layer 0"):
            infer_shapes(parse_architecture("C(5,1,4)"), (3, 3, 1))

    def test_kind_mismatches_rejected(self):
        with pytest.raises(ShapeInferenceError, match="flat vector"):
            infer_shapes(parse_architecture("FC(3)"), (4, 4, 1))
        with pytest.raises(ShapeInferenceError, match="spatial"):
            infer_shapes(parse_architecture("C(1,1,2)"), (16,))
        with pytest.raises(ShapeInferenceError, match="reshape"):
            infer_shapes(parse_architecture("Shape(3,3)"), (10,))


class TestBuild:
    def test_forward_maps_input_to_output_shape(self):
        spec = infer_shapes(parse_architecture(CLASSIFIER_28), (28, 28, 2))
        net = build_network(spec, 0)
        out = net(torch.rand(3, 2, 28, 28))
        assert out.shape == (3, 2)

    def test_decoder_vector_to_image(self):
        text = "FC(24) -> FC(49) -> Shape(7,7) -> T_s(3,2,16) -> T_s(3,1,16) -> T_s(3,2,16) -> C(1,1,2)"
        spec = infer_shapes(parse_architecture(text, "leaky_relu"), (24,))
        assert spec.output_shape == (28, 28, 2)
        net = build_network(spec, 1)
        out = net(torch.rand(2, 24))
        assert out.shape == (2, 2, 28, 28)

    def test_seeded_build_is_bitwise_reproducible(self):
        spec = infer_shapes(parse_architecture(CLASSIFIER_28), (28, 28, 2))
        a = build_network(spec, 42)
        b = build_network(spec, 42)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        c = build_network(spec, 43)
        assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))

    def test_zeroed_final_layer_gives_constant_output(self):
        spec = infer_shapes(parse_architecture("C(3,1,4) -> Avg -> FC(3)"), (6, 6, 1))
        net = build_network(spec, 0)
        with torch.no_grad():
            net.ops[-1].weight.zero_()
            net.ops[-1].bias.zero_()
        out = net(torch.rand(5, 1, 6, 6))
        assert torch.equal(out, torch.zeros(5, 3))

    def test_gradients_match_finite_differences(self):
        # central differences on random 4x4 inputs, <= 1e-3 relative error
        spec = infer_shapes(
            parse_architecture("C_s(3,2,3) -> T_s(3,2,2) -> C(1,1,1)", "leaky_relu"),
            (4, 4, 2),
        )
        net = build_network(spec, 0, dtype=torch.float64)
        x = torch.rand(1, 2, 4, 4, dtype=torch.float64)
        weights = torch.rand(1, 1, 4, 4, dtype=torch.float64)

        def loss_value():
            return (net(x) * weights).sum()

        loss = loss_value()
        loss.backward()
        eps = 1e-6
        checked = 0
        for param in net.parameters():
            flat = param.detach().reshape(-1)
            grads = param.grad.reshape(-1)
            for idx in range(0, flat.numel(), max(flat.numel() // 3, 1)):
                with torch.no_grad():
                    original = flat[idx].item()
                    flat[idx] = original + eps
                    up = loss_value().item()
                    flat[idx] = original - eps
                    down = loss_value().item()
                    flat[idx] = original
                fd = (up - down) / (2 * eps)
                ag = grads[idx].item()
                assert abs(fd - ag) <= 1e-3 * max(abs(fd), abs(ag), 1e-8)
                checked += 1
        assert checked >= 10
