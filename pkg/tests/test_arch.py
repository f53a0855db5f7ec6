import numpy as np
import pytest

from core.arch import (
    CATALOG,
    ArchDescriptor,
    DenseSpec,
    MaxPool2dSpec,
    build,
    concatenate,
    get_arch,
    layer_breakdown,
    list_archs,
    load_arch_file,
    param_count,
    parse_arch_text,
    resolve_arch,
    tiny_cnn,
    tiny_cnn_bn,
    tiny_mlp,
    transmitted_count,
)
from core.errors import ArchitectureError


@pytest.mark.parametrize(
    "name,expected",
    [
        ("alexnet", 57_020_228),
        ("resnet18", 11_178_564),
        ("squeezenet_v1_0", 737_476),
        ("vgg11_batchnorm", 128_788_228),
        ("shufflenet_v2_x1_0", 1_257_704),
    ],
)
def test_catalog_parameter_counts(name, expected):
    assert param_count(get_arch(name)) == expected


def test_desk_model_counts():
    assert param_count(tiny_mlp()) == 676
    assert param_count(tiny_cnn()) == 2132
    assert param_count(tiny_cnn_bn()) == 2140
    assert transmitted_count(tiny_cnn_bn()) == 2156
    assert transmitted_count(tiny_mlp()) == 676


def test_built_model_matches_descriptor():
    for arch in (tiny_mlp(), tiny_cnn(), tiny_cnn_bn()):
        model = build(arch, seed=0)
        assert param_count(model) == param_count(arch)
        assert transmitted_count(model) == transmitted_count(arch)


def test_catalog_networks_are_not_buildable():
    with pytest.raises(ArchitectureError):
        build(get_arch("alexnet"))


def test_vgg_batchnorm_difference_is_gamma_beta():
    arch = get_arch("vgg11_batchnorm")
    bn_channels = 64 + 128 + 256 * 2 + 512 * 4
    assert 2 * bn_channels == 5_504
    assert arch.transmitted_count - arch.trainable_count == 5_504


def test_num_classes_changes_only_the_head():
    four = param_count(get_arch("alexnet", num_classes=4))
    ten = param_count(get_arch("alexnet", num_classes=10))
    assert ten - four == 6 * (4096 + 1)


def test_shape_functions_of_catalog_networks():
    alex = get_arch("alexnet").layer_shapes()
    assert alex[0] == (64, 55, 55)
    assert alex[2] == (64, 27, 27)
    squeeze = get_arch("squeezenet_v1_0").layer_shapes()
    assert squeeze[0] == (96, 109, 109)
    # ceil-mode pooling
    assert squeeze[2] == (96, 54, 54)
    assert get_arch("resnet18").layer_shapes()[-1] == (4,)


def test_ceil_mode_pool_shape():
    pool = MaxPool2dSpec(kernel_size=3, stride=2, ceil_mode=True)
    assert pool.output_shape((1, 13, 13)) == (1, 6, 6)
    assert pool.output_shape((1, 54, 54)) == (1, 27, 27)
    assert MaxPool2dSpec(kernel_size=3, stride=2).output_shape((1, 54, 54)) == (1, 26, 26)


def test_unknown_arch():
    with pytest.raises(ArchitectureError):
        get_arch("lenet")


def test_input_shape_only_for_desk_models():
    assert get_arch("tiny_cnn", input_shape=(3, 8, 8)).input_shape == (3, 8, 8)
    with pytest.raises(ArchitectureError):
        get_arch("alexnet", input_shape=(3, 32, 32))


def test_list_archs_matches_catalog():
    assert list_archs() == list(CATALOG)
    assert {"tiny_mlp", "alexnet", "shufflenet_v2_x1_0"} <= set(list_archs())


def test_descriptor_rejects_wrong_head():
    with pytest.raises(ArchitectureError):
        ArchDescriptor(
            name="bad",
            input_shape=(8,),
            num_classes=4,
            layers=[DenseSpec(in_features=8, out_features=3)],
        )


def test_descriptor_rejects_shape_mismatch():
    with pytest.raises(ArchitectureError):
        ArchDescriptor(
            name="bad",
            input_shape=(8,),
            num_classes=4,
            layers=[DenseSpec(in_features=7, out_features=4)],
        )


ARCH_TEXT = """
# two-layer perceptron
arch name=file_mlp input=8 classes=3 trainable=true
dense in_features=8 out_features=5
relu
dense in_features=5 out_features=3 bias=false
"""


def test_parse_arch_text():
    arch = parse_arch_text(ARCH_TEXT)
    assert arch.name == "file_mlp"
    assert arch.input_shape == (8,)
    assert arch.trainable
    assert param_count(arch) == 8 * 5 + 5 + 5 * 3
    model = build(arch, seed=1)
    assert model.forward(np.zeros((2, 8))).shape == (2, 3)


def test_arch_file_round_trip_through_disk(tmp_path):
    path = tmp_path / "mlp.arch"
    path.write_text(ARCH_TEXT)
    assert load_arch_file(path) == parse_arch_text(ARCH_TEXT)
    assert resolve_arch(str(path), num_classes=3).name == "file_mlp"
    with pytest.raises(ArchitectureError):
        resolve_arch(str(path), num_classes=4)


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("", "empty"),
        ("dense in_features=1 out_features=2", "must start"),
        ("arch name=x input=4\ndense in_features=4 out_features=2", "missing"),
        ("arch name=x input=4 classes=2\ndense in_features=4", "line 2"),
        ("arch name=x input=4 classes=2\nconv9d k=3", "line 2"),
        ("arch name=x input=4 classes=2\ndense in_features", "line 2"),
        ("arch name=x input=4 classes=2 trainable=maybe\ndense in_features=4 out_features=2", "trainable"),
    ],
)
def test_parse_arch_text_errors(text, fragment):
    with pytest.raises(ArchitectureError) as exc:
        parse_arch_text(text)
    assert fragment in exc.value.message


def test_catalog_only_layer_in_trainable_file():
    text = "arch name=f input=8,4,4 classes=16 trainable=true\nfire in_channels=8 squeeze=2 expand1x1=8 expand3x3=8\nadaptive_avgpool2d output_size=1\nflatten\n"
    arch = parse_arch_text(text)
    with pytest.raises(ArchitectureError):
        build(arch)


def test_concatenate_adds_counts():
    head = parse_arch_text(
        "arch name=head input=8 classes=4 trainable=true\ndense in_features=8 out_features=4\n"
    )
    body = tiny_mlp(num_classes=8, input_shape=(16,))
    chained = concatenate(body, head)
    assert param_count(chained) == param_count(body) + param_count(head)
    assert chained.input_shape == (16,)
    assert chained.num_classes == 4
    assert chained.trainable


def test_concatenate_rejects_incompatible():
    with pytest.raises(ArchitectureError):
        concatenate(tiny_mlp(num_classes=4), tiny_mlp(num_classes=4, input_shape=(16,)))


def test_layer_breakdown_sums_to_total():
    arch = get_arch("resnet18")
    rows = layer_breakdown(arch)
    assert len(rows) == len(arch.layers)
    assert sum(r["trainable"] for r in rows) == arch.trainable_count
    assert sum(r["trainable"] + r["buffers"] for r in rows) == arch.transmitted_count
    assert rows[-1]["output_shape"] == [4]


def test_tiny_mlp_flattens_image_input():
    arch = tiny_mlp(input_shape=(1, 4, 4))
    assert arch.layers[0].kind == "flatten"
    assert param_count(arch) == 16 * 32 + 32 + 32 * 4 + 4
