import random

import pytest

from tokoin.accumulator import new_group
from tokoin.crypto import gen_keypair
from tokoin.model import (
    AccessPolicy,
    ConditionExpr,
    GeoFence,
    ProcedureSpec,
    ResourceSpec,
    SubjectGroup,
    TimeWindow,
)


def keypair_for(tag: int):
    return gen_keypair(seed=tag.to_bytes(4, "big") + bytes(28))


@pytest.fixture(scope="session")
def group_setup():
    # modulus generation is the slow part; share one trapdoor setup per session
    return new_group(rng=random.Random(0xACC))


@pytest.fixture(scope="session")
def small_group_setup():
    # 512-bit modulus: fast enough to exercise the math in tight loops
    return new_group(modulus_bits=512, rng=random.Random(0x5ACC))


ALL_LEAVES = ConditionExpr.all_of(
    ConditionExpr.of("SubjectInGroup"),
    ConditionExpr.of("TimeInWindow"),
    ConditionExpr.of("GeoWithinRadius"),
    ConditionExpr.of("ResourceMatch"),
)


def make_policy(
    group,
    *,
    resource="front-door",
    action="in-home-delivery",
    start=0,
    end=100_000,
    lat=38.8997,
    lon=-77.0486,
    radius_m=50.0,
    actions=("unlock", "drop", "lock"),
    region="sha256:default-mask",
    max_duration_s=300.0,
    grace_s=60.0,
    condition=None,
    uses=1,
) -> AccessPolicy:
    who = SubjectGroup(n=group.n, g=group.g, value=group.value)
    return AccessPolicy(
        who=who,
        what=ResourceSpec(resource_id=resource, action=action),
        when=TimeWindow(start=start, end=end),
        where=GeoFence(lat=lat, lon=lon, radius_m=radius_m),
        how=ProcedureSpec(
            actions=tuple(actions),
            allowed_region=region,
            max_duration_s=max_duration_s,
            grace_s=grace_s,
        ),
        condition=condition or ALL_LEAVES,
        uses_remaining=uses,
    )
