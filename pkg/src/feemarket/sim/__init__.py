from .queue import (
    BlockLog,
    Dist,
    Equilibrium,
    Exogenous,
    SimAgent,
    SimConfig,
    SimDataset,
    check_block_packing,
    check_single_crossing,
    simulate_queue,
    surplus_identity_holds,
)
from .vcg import (
    FeeSchedule,
    StaticInstance,
    compute_vcg_schedule,
    count_single_crossing_violations,
    foc_residual,
    vcg_payment_bruteforce,
    vcg_payment_discrete,
)
