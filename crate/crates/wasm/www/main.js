import init, { Trainer, add_noise, blob_image, psnr, ssim } from "./pkg/fdn_wasm.js";

const SIZE = 32;
const $ = (id) => document.getElementById(id);

function draw(id, pixels) {
  const ctx = $(id).getContext("2d");
  const img = ctx.createImageData(SIZE, SIZE);
  pixels.forEach((v, i) => {
    img.data.set([v, v, v, 255], 4 * i);
  });
  ctx.putImageData(img, 0, 0);
}

function score(a, b) {
  return `${psnr(a, b, SIZE, SIZE).toFixed(2)} dB, ssim ${ssim(a, b, SIZE, SIZE).toFixed(3)}`;
}

await init();

let seed = 1;
let clean = blob_image(SIZE, BigInt(seed));
let noisy = clean;
const trainer = new Trainer(SIZE, 25, 0.75, 7n);

function refreshNoisy() {
  const sigma = Number($("sigma").value);
  $("sigma-val").textContent = sigma;
  noisy = add_noise(clean, SIZE, SIZE, sigma, BigInt(seed));
  draw("clean", clean);
  draw("noisy", noisy);
  $("noisy-score").textContent = sigma === 0 ? "identical" : score(noisy, clean);
  refreshDenoised();
}

function refreshDenoised() {
  const k = Number($("fraction").value);
  $("fraction-val").textContent = `${k}/16`;
  if (trainer.iterations() === 0n) return;
  const out = trainer.denoise(noisy, SIZE, SIZE, k / 16);
  draw("denoised", out);
  $("denoised-score").textContent = score(out, clean);
  refreshSample();
}

function refreshSample() {
  const alpha = Number($("alpha").value) / 100;
  $("alpha-val").textContent = alpha.toFixed(2);
  if (trainer.iterations() === 0n) return;
  draw("sample", trainer.sample(clean, SIZE, SIZE, alpha, BigInt(seed * 1000 + Number($("alpha").value))));
}

$("sigma").addEventListener("input", refreshNoisy);
$("fraction").addEventListener("input", refreshDenoised);
$("alpha").addEventListener("input", refreshSample);
$("resample").addEventListener("click", () => {
  seed += 1;
  refreshSample();
});
$("new-image").addEventListener("click", () => {
  seed += 1;
  clean = blob_image(SIZE, BigInt(seed));
  refreshNoisy();
});
$("train").addEventListener("click", () => {
  $("train-status").textContent = "training...";
  // let the status paint before the blocking call
  setTimeout(() => {
    const loss = trainer.train(50);
    $("train-status").textContent = `iteration ${trainer.iterations()}, loss ${loss.toFixed(4)}`;
    refreshDenoised();
  }, 20);
});

refreshNoisy();
