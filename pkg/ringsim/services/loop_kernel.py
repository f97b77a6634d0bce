"""Per-sample closed-loop kernel.

Compiled with numba when it is importable; otherwise the same functions
run as plain Python with identical results.
"""
import math

import numpy as np

# Optional import for numba
try:
    from numba import njit
    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func
        return decorator


# Column order of the kernel output matrix
CHANNELS = (
    "cw_error",
    "ccw_error",
    "aom_cmd",
    "pzt_cmd",
    "tec_cmd",
    "true_cw_detuning",
    "true_ccw_detuning",
)


@njit(cache=True, nogil=True)
def sos_step(sos, state, start, count, x, limit):
    """Advance sections [start, start + count) of a DF2T cascade by one sample.

    The output of the last section is clamped to +-limit and the clamped
    value is fed back into that section's state.
    """
    y = x
    last = start + count - 1
    for k in range(start, start + count):
        out = sos[k, 0] * y + state[k, 0]
        if k == last:
            if out > limit:
                out = limit
            elif out < -limit:
                out = -limit
        state[k, 0] = sos[k, 1] * y - sos[k, 4] * out + state[k, 1]
        state[k, 1] = sos[k, 2] * y - sos[k, 5] * out
        y = out
    return y


@njit(cache=True, nogil=True)
def lock_loss_count(count, detuning_hz, window_hz):
    """Leaky out-of-window counter: +1 outside the lock window, -1 inside, floored at 0.

    A loop ringing through zero keeps climbing; a brief excursion drains away.
    """
    if abs(detuning_hz) > window_hz:
        return count + 1
    if count > 0:
        return count - 1
    return 0


@njit(cache=True, nogil=True)
def closed_loop_kernel(
    n_samples,
    decimation,
    initial_detuning_hz,
    anisotropy_hz,
    discriminator_w_per_hz,
    injection_amplitude_hz,
    injection_rad_per_sample,
    laser_noise_hz,
    cw_noise_w,
    ccw_noise_w,
    noise_enabled,
    plant_sos,
    plant_state_cw,
    plant_state_ccw,
    fast_sos,
    fast_state,
    fast_starts,
    fast_counts,
    actuator_sos,
    actuator_state,
    pzt_sos,
    pzt_state,
    tec_sos,
    tec_state,
    has_pzt,
    has_tec,
    servo_enabled,
    overall_gain,
    aom_limit_hz,
    pzt_limit_hz,
    tec_limit_hz,
    delay_line,
    lock_window_hz,
    dwell_samples,
    out,
):
    """Run the loop for ``n_samples`` and write block averages into ``out``.

    Returns the sample index at which lock was declared lost, or -1.
    """
    n_delay = delay_line.size
    head = 0
    outside = 0
    block = 0
    filled = 0
    n_channels = out.shape[1]
    sums = np.zeros(n_channels)
    inv_d = 1.0 / discriminator_w_per_hz

    for n in range(n_samples):
        # correction from the error seen n_delay samples ago
        u = 0.0
        p = 0.0
        t = 0.0
        correction = 0.0
        if servo_enabled:
            x = overall_gain * delay_line[head]
            for i in range(fast_starts.size):
                x = sos_step(fast_sos, fast_state, fast_starts[i], fast_counts[i], x, aom_limit_hz)
            u = -x
            correction = sos_step(actuator_sos, actuator_state, 0, actuator_sos.shape[0], u, math.inf)
            if has_pzt:
                p = sos_step(pzt_sos, pzt_state, 0, pzt_sos.shape[0], u, pzt_limit_hz)
                correction += p
                if has_tec:
                    t = sos_step(tec_sos, tec_state, 0, tec_sos.shape[0], p, tec_limit_hz)
                    correction += t

        laser = initial_detuning_hz + correction
        if noise_enabled:
            laser += laser_noise_hz[n]
        injected = injection_amplitude_hz * math.cos(injection_rad_per_sample * n)
        cw_detuning = laser + injected
        ccw_detuning = laser + anisotropy_hz

        cw_error = discriminator_w_per_hz * sos_step(
            plant_sos, plant_state_cw, 0, plant_sos.shape[0], cw_detuning, math.inf
        )
        ccw_error = discriminator_w_per_hz * sos_step(
            plant_sos, plant_state_ccw, 0, plant_sos.shape[0], ccw_detuning, math.inf
        )
        if noise_enabled:
            cw_error += cw_noise_w[n]
            ccw_error += ccw_noise_w[n]

        delay_line[head] = cw_error * inv_d
        head += 1
        if head == n_delay:
            head = 0

        sums[0] += cw_error
        sums[1] += ccw_error
        sums[2] += u
        sums[3] += p
        sums[4] += t
        sums[5] += cw_detuning
        sums[6] += ccw_detuning
        filled += 1
        if filled == decimation:
            if block < out.shape[0]:
                for c in range(n_channels):
                    out[block, c] = sums[c] / decimation
            for c in range(n_channels):
                sums[c] = 0.0
            block += 1
            filled = 0

        outside = lock_loss_count(outside, cw_detuning, lock_window_hz)
        if outside > dwell_samples:
            return n

    return -1
