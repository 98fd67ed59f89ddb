"""Tour of the shape-constrained activations.

Prints the convex, concave and saturated units on a small grid, checks that
their derivatives never go negative, and shows the step approximation
sharpening as the input is scaled up.
"""
import numpy as np

from coman.activations import CluParams, FpmParams, clu, clu_derivative, concave, fpm, heaviside_approx, saturated

x = np.linspace(-3, 3, 7)
p = CluParams()  # omega0 = 2, omega1 = 2

print("x          ", np.round(x, 2))
print("convex     ", np.round(clu(x, p), 4))
print("concave    ", np.round(concave(x, p), 4))
print("saturated  ", np.round(saturated(x, p), 4))

# all three are non-decreasing everywhere
fine = np.linspace(-5, 5, 2001)
for name, f in (("convex", clu), ("concave", concave), ("saturated", saturated)):
    print(f"{name:10s} min step {np.diff(f(fine, p)).min():+.2e}")
print("convex slope at 0:", clu_derivative(0.0, p))

# scaling the input turns the saturated unit into a step at 0
window = 0.1
for a in (1, 4, 16, 64, 256):
    xs = np.concatenate([np.linspace(-5, -window, 500), np.linspace(window, 5, 500)])
    dist = np.abs(heaviside_approx(xs, a, CluParams(2.0, 1.0)) - (xs > 0)).max()
    print(f"a={a:4d}  sup distance outside |x|<{window}: {dist:.3e}")

# the four-parameter response head: floor, steepness, inflection, ceiling
head = FpmParams(0.1, 8.0, 0.4, 0.7)
t = np.linspace(0, 1, 6)
print("response head", np.round(fpm(t, head), 4))
