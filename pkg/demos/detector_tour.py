# %% [markdown]
# # Spotting attacks in the log-magnitude spectrum
#
# A sign-gradient perturbation is broadband noise. On smooth images it lifts the
# high-frequency floor of the spectrum, which an autoencoder trained on clean
# spectra reconstructs poorly. This walks through training, calibration and
# guarded classification at 32x32.

# %%
import numpy as np

from freqshield import detector as D
from freqshield.attacks import AttackSpec, run_attack
from freqshield.data import balance, generate_synthetic, split
from freqshield.models import build_simple_cnn, build_unet_autoencoder, train_autoencoder, train_classifier
from freqshield.transforms import log_magnitude_feature

ds = generate_synthetic(60, size=32, seed=0)
sp = split(ds)
train, test = balance(ds.subset(sp.train)), ds.subset(sp.test)
clf = build_simple_cnn(input_size=32, seed=0)
train_classifier(clf, train.images[:, None], train.labels, epochs=8, seed=0)

# %%
adv = run_attack(AttackSpec("fgsm", 8 / 255), clf, test.images, test.labels).adversarial[:, 0]
s_clean, s_adv = log_magnitude_feature(test.images), log_magnitude_feature(adv)
k = np.hypot(*np.mgrid[-16:16, -16:16])
outer = k > 8
print("mean feature, outer ring: clean %.3f  attacked %.3f" % (s_clean[:, outer].mean(), s_adv[:, outer].mean()))

# %%
ae = build_unet_autoencoder(input_size=32, latent=32, seed=0)
hist = train_autoencoder(ae, D.preprocess(train.images), "mse", epochs=10, seed=0)
print("reconstruction mse: %.4f -> %.4f" % (hist[0]["mse"], hist[-1]["mse"]))

bundle = D.DetectorBundle(ae, "mse")
cal = D.calibrate(bundle, generate_synthetic(100, size=32, seed=1).images, q=0.95)
print("thresholds: t_re %.5f  t_enc %.3f  t_dec %.3f" % (cal.t_re, cal.t_enc, cal.t_dec))

# %% [markdown]
# False positives on fresh clean images should sit near 1 - q.

# %%
hold = generate_synthetic(100, size=32, seed=2).images
for method in D.METHODS:
    print(f"{method:9s} holdout FPR {D.detect(bundle, hold, method).flagged.mean():.3f}  "
          f"flags on attacked {D.detect(bundle, adv, method).flagged.mean():.3f}")

# %%
mixed = np.concatenate([test.images, adv])
labels = np.concatenate([test.labels, test.labels])
is_adv = np.r_[np.zeros(len(test), bool), np.ones(len(adv), bool)]
verdict = D.detect(bundle, mixed, "loss")
guarded = D.guarded_classify(bundle, clf, mixed, verdict=verdict)
print("unguarded accuracy %.3f" % (clf.predict(mixed[:, None]) == labels).mean())
print("guarded accuracy   %.3f" % D.guarded_accuracy(guarded, labels, is_adv))
print("detection accuracy %.3f" % D.detection_accuracy(verdict.flagged, is_adv))
