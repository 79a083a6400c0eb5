import numpy as np
import pytest
import torch

from mipa.encoder import EncoderConfig, PatchEncoder, TokenMap, image_to_patches
from mipa.model import MiPaDetector, build_classifier, load_checkpoint, save_checkpoint
from mipa.mosaic import mix_images, patchify
from oracles import central_difference

SMALL = EncoderConfig(patch_size=4, embed_dim=16, stage_depths=[1, 1], num_heads=2)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=30, num_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(stage_depths=[])
    with pytest.raises(ValueError):
        EncoderConfig(stage_depths=[2, 0])


def test_zero_embedding_gives_zero_tokens():
    enc = PatchEncoder(SMALL, 4, 4)
    torch.nn.init.zeros_(enc.embed.proj.weight)
    torch.nn.init.zeros_(enc.embed.proj.bias)
    torch.nn.init.zeros_(enc.embed.pos)
    tokens = enc.embed_patches(torch.zeros(2, 3, 16, 16))
    assert tokens.stage_index == 0
    assert tokens.tokens.shape == (2, 4, 4, 16)
    assert torch.count_nonzero(tokens.tokens) == 0


def test_embed_accepts_patch_grid():
    enc = PatchEncoder(SMALL, 4, 5)
    image = np.random.default_rng(0).random((16, 20, 3)).astype(np.float32)
    from_grid = enc.embed_patches(patchify(image, 4)).tokens
    from_batch = enc.embed_patches(torch.tensor(image).permute(2, 0, 1)[None]).tokens
    assert from_grid.shape == (1, 4, 5, 16)
    assert torch.equal(from_grid, from_batch)


def test_embed_permutation_probe():
    enc = PatchEncoder(SMALL, 2, 2)
    rng = np.random.default_rng(1)
    image = torch.tensor(rng.random((1, 3, 8, 8)), dtype=torch.float32)
    swapped = image.clone()
    swapped[..., 0:4, 0:4], swapped[..., 4:8, 4:8] = image[..., 4:8, 4:8], image[..., 0:4, 0:4]
    proj = enc.embed.proj
    a = proj(image_to_patches(image, 4))[0]
    b = proj(image_to_patches(swapped, 4))[0]
    assert torch.equal(a[0, 0], b[1, 1]) and torch.equal(a[1, 1], b[0, 0])
    assert torch.equal(a[0, 1], b[0, 1]) and torch.equal(a[1, 0], b[1, 0])


def test_embed_rejects_wrong_channels():
    enc = PatchEncoder(SMALL, 4, 4)
    with pytest.raises(ValueError):
        enc.embed_patches(torch.zeros(1, 1, 16, 16))


def test_zero_init_residual_identity():
    enc = PatchEncoder(SMALL, 4, 4)
    enc.zero_init_residuals()
    tokens = enc.embed_patches(torch.rand(2, 3, 16, 16))
    stage1, final = enc.encode(tokens)
    assert torch.equal(stage1.tokens, tokens.tokens)
    assert stage1.stage_index == 1
    assert final.tokens.shape == (2, 2, 2, 16)


def test_attention_rows_normalized():
    enc = PatchEncoder(SMALL, 4, 4)
    enc.encode(enc.embed_patches(torch.rand(2, 3, 16, 16)), keep_weights=True)
    for stage in enc.stages:
        weights = stage[0].attn.last_weights
        np.testing.assert_allclose(weights.sum(-1).numpy(), 1.0, atol=1e-6)


def test_encoder_gradient_finite_differences():
    torch.manual_seed(0)
    enc = PatchEncoder(SMALL, 4, 4).double()
    images = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    probe = torch.randn(2, 2, 2, 16, dtype=torch.float64)

    def scalar():
        return (enc(images)[1].tokens * probe).sum()

    params = list(enc.parameters())
    grads = torch.autograd.grad(scalar(), params)
    cells = [(k, i) for k, g in enumerate(grads) for i in range(g.numel()) if abs(g.view(-1)[i]) > 1e-5]
    rng = np.random.default_rng(0)
    picks = rng.choice(len(cells), size=100, replace=False)
    worst = 0.0
    for p in picks:
        k, i = cells[p]
        with torch.no_grad():
            fd = central_difference(lambda: scalar().item(), params[k], i)
        got = grads[k].view(-1)[i].item()
        worst = max(worst, abs(got - fd) / max(abs(got), abs(fd)))
    assert worst < 1e-4


def test_encoder_eval_deterministic_and_finite():
    enc = PatchEncoder(EncoderConfig(), 8, 8).eval()
    x = torch.rand(3, 3, 32, 32)
    a, b = enc(x), enc(x)
    assert torch.equal(a[1].tokens, b[1].tokens)
    assert torch.isfinite(a[1].tokens).all()


def test_nonfinite_activation_guard():
    enc = PatchEncoder(SMALL, 4, 4)
    tokens = enc.embed_patches(torch.rand(1, 3, 16, 16))
    bad = TokenMap(tokens.tokens.clone().index_fill_(1, torch.tensor([0]), float("nan")), 0)
    with pytest.raises(FloatingPointError):
        enc.encode(bad)


def test_shared_weights_across_input_paths():
    model = MiPaDetector(EncoderConfig(), (32, 32), 2)
    n_params = sum(p.numel() for p in model.parameters())
    rgb, ir = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
    mosaic = mix_images(ir, rgb, torch.randint(0, 2, (2, 8, 8)), 4)
    seen = []
    hooks = [model.encoder.embed.proj.register_forward_hook(
        lambda mod, inp, out: seen.append(id(mod.weight)))]
    for images in (rgb, ir, mosaic):
        model(images)
    for h in hooks:
        h.remove()
    assert len(set(seen)) == 1 and len(seen) == 3
    assert sum(p.numel() for p in model.parameters()) == n_params


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    model = MiPaDetector(SMALL, (16, 16), 2)
    classifier = build_classifier(model, 0)
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(path, model, {"regime": "mipa"}, classifier)
    loaded, archive = load_checkpoint(path)
    x = torch.rand(1, 3, 16, 16)
    model.eval()
    assert torch.equal(model(x)[1], loaded(x)[1])
    assert archive["encoder_config"] == SMALL.to_dict()
    archive["format_version"] = 99
    torch.save(archive, path)
    with pytest.raises(ValueError, match="format version"):
        load_checkpoint(path)


def test_classifier_does_not_disturb_detector_init():
    torch.manual_seed(5)
    a = MiPaDetector(SMALL, (16, 16), 2)
    build_classifier(a, 1)
    after_a = torch.rand(1)
    torch.manual_seed(5)
    MiPaDetector(SMALL, (16, 16), 2)
    assert torch.equal(after_a, torch.rand(1))
