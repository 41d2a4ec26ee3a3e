from shutil import rmtree
from tempfile import mkdtemp
from io import StringIO

import pytest
import param
import torch

import t3kit.config as config
from t3kit.action_dictionary import build_dictionary
from t3kit.params import RunConfig
from t3kit.serialization import serialize_from_obj_to_yaml


param.parameterized.warnings_as_exceptions = True


@pytest.fixture(params=["ruamel_yaml", "pyyaml"])
def yaml_loader(request):
    if request.param == "ruamel_yaml":
        YAML = pytest.importorskip("ruamel.yaml").YAML
        yaml_loader = YAML(typ="safe").load
        module_names = ("ruamel.yaml",)
    else:
        yaml = pytest.importorskip("yaml")

        def yaml_loader(x):
            return yaml.load(x, Loader=yaml.FullLoader)

        module_names = ("yaml",)
    old_props = config.YAML_MODULE_PRIORITIES
    config.YAML_MODULE_PRIORITIES = module_names
    yield yaml_loader
    config.YAML_MODULE_PRIORITIES = old_props


@pytest.fixture(params=[True, False])
def with_yaml(request):
    if request.param:
        try:
            with StringIO() as fp:
                serialize_from_obj_to_yaml(fp, {"foo": 1})
        except ImportError:
            pytest.skip("No yaml serializer")
        yield True
    else:
        old_props = config.YAML_MODULE_PRIORITIES
        config.YAML_MODULE_PRIORITIES = tuple()
        yield False
        config.YAML_MODULE_PRIORITIES = old_props


@pytest.fixture
def temp_dir():
    dir_name = mkdtemp()
    yield dir_name
    rmtree(dir_name, ignore_errors=True)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


TABLE_PAIRS = {0: (4, 36), 1: (26, 28), 2: (33, 36), 113: (4, 0)}


@pytest.fixture(scope="session")
def table_dictionary():
    """41 verbs, 45 nouns, 114 actions, with a few rows pinned to known pairs"""
    pinned = set(TABLE_PAIRS.values())
    fill = ((v, n) for v in range(41) for n in range(45) if (v, n) not in pinned)
    pairs = [TABLE_PAIRS[a] if a in TABLE_PAIRS else next(fill) for a in range(114)]
    return build_dictionary(pairs, 41, 45)


@pytest.fixture
def small_dictionary():
    # action 0 = (0, 1), 1 = (1, 0), 2 = (1, 2); (0, 0) is absent
    return build_dictionary([(0, 1), (1, 0), (1, 2)], 2, 3)


def _tiny_run(task="recognition", head_mode="adg"):
    run = RunConfig()
    run.task.task = task
    run.task.head_mode = head_mode
    run.task.log_every = 1
    st = run.stitch
    st.num_selected = 4
    st.crop_size = 8
    st.resize_factor = 0.5
    st.test_replicas = 3
    mo = run.moma
    mo.embed_dim = 16
    mo.encoder_width = 4
    mo.attention_heads = 2
    mo.queue_length = 16
    mc = run.mcan
    mc.size = "custom"
    mc.hidden_dim = 16
    mc.heads = 2
    mc.layers = 1
    mc.flat_mlp_dim = 16
    mc.word_dim = 8
    mc.feature_dim = 24
    mc.max_objects = 4
    mc.max_tokens = 12
    mc.block_size = 5
    mc.dropout = 0.0
    sy = run.synthetic
    sy.num_videos = 4
    sy.frames_per_video = 6
    sy.frame_size = 32
    sy.num_verbs = 2
    sy.num_nouns = 2
    sy.num_actions = 3
    sy.clips_per_stream = 2
    sy.test_fraction = 0.5
    sy.num_question_types = 2
    sy.num_answers = 3
    sy.num_objects = 3
    sy.feature_dim = 24
    op = run.optim
    op.steps = 3
    op.batch_size = 2
    return run


@pytest.fixture
def tiny_run():
    return _tiny_run()


@pytest.fixture
def tiny_run_factory():
    return _tiny_run
