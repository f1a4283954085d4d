import pytest
import torch

from dfquant.config import parse_config
from dfquant.data import DatasetSpec, make_toy_dataset
from dfquant.modelkit import TeacherSchedule, build_classifier, train_teacher

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def default_cfg():
    return parse_config(env={})


@pytest.fixture(scope="session")
def toy_data(default_cfg):
    d = default_cfg.data
    return make_toy_dataset(DatasetSpec(num_classes=d.num_classes, samples_per_class=d.samples_per_class,
                                        noise_level=d.noise_level, color_jitter=d.color_jitter, seed=d.seed))


@pytest.fixture(scope="session")
def trained_teacher(default_cfg, toy_data):
    """The default-config full-precision teacher, trained once per session (~25 s)."""
    t = default_cfg.teacher
    model = build_classifier(default_cfg.model.arch, default_cfg.data.num_classes, seed=t.seed,
                             width=default_cfg.model.width)
    model, history = train_teacher(model, toy_data[0], TeacherSchedule(t.epochs, t.lr, t.batch_size,
                                                                       t.weight_decay, t.seed))
    return model, history


@pytest.fixture
def teacher(trained_teacher):
    import copy
    return copy.deepcopy(trained_teacher[0])


_CRITERIA: list[str] = []


@pytest.fixture
def record():
    """Print an acceptance line immediately and keep it for the terminal summary."""
    def _record(line):
        _CRITERIA.append(line)
        print(line)
    return _record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

