import pytest

from cherryflow.flatmap import MapFamily, SaddleSpec
from cherryflow.numerics import make_context

# Parameters of the canonical golden-mean maps, produced once by
# rotation.tune_parameter(family, golden_mean, 1e-10) and frozen here so the
# suite does not re-tune on every run (cherryflow tune reproduces them).
OMEGA = {
    ("0.8", 512): "9.262513935830567569716906340523379575012440953068966993794521625321399830803987146709189958426143677085140406448115581480305131613274442032730227486847153898e-2",
    ("0.8", 256): "9.2625139358305675697169063405233795750124409530689669937945216253213998308029769e-2",
    ("2.5", 256): "7.4776243228670231379412896626317434475299966191441658480698606581427156925199257e-2",
    ("2.5", 512): "7.477624322867023137941289662631743447529996619144165848069860658142715692520141601562499999999999999999999999999999999999999999999999999999999999999999998135e-2",
    ("1", 256): "9.0417451364053670725567835634255524984164414989238553168276239041831772273654424e-2",
}


def family(r, bits):
    ctx = make_context(bits)
    return MapFamily(ctx.real("0.40"), ctx.real("0.55"), ctx.real(r), ctx.real("0.05"), ctx)


def tuned(r, bits):
    fam = family(r, bits)
    return fam.at(fam.ctx.real(OMEGA[(r, bits)]))


def saddle(r, bits):
    return SaddleSpec.from_r(r, ctx=make_context(bits))


@pytest.fixture(scope="session")
def map_a():
    return tuned("0.8", 512)


@pytest.fixture(scope="session")
def map_b():
    return tuned("2.5", 256)


@pytest.fixture(scope="session")
def family_b():
    return family("2.5", 256)
