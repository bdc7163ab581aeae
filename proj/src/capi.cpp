#include "spi/spi.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <new>
#include <string>

#include "spi/checkpoint.hpp"
#include "spi/config.hpp"
#include "spi/data.hpp"
#include "spi/error.hpp"
#include "spi/imaging.hpp"
#include "spi/losses.hpp"
#include "spi/training.hpp"

struct spi_config {
  spi::ExperimentConfig cfg;
};

struct spi_model {
  spi::Reconstructor rec;
};

namespace {

thread_local std::string g_last_error;

spi_status to_status(spi::ErrorCode code) {
  switch (code) {
    case spi::ErrorCode::invalid_argument: return SPI_ERR_INVALID_ARGUMENT;
    case spi::ErrorCode::shape_mismatch: return SPI_ERR_SHAPE;
    case spi::ErrorCode::io: return SPI_ERR_IO;
    case spi::ErrorCode::numerical: return SPI_ERR_NUMERICAL;
    case spi::ErrorCode::not_converged: return SPI_ERR_NOT_CONVERGED;
    case spi::ErrorCode::state: return SPI_ERR_STATE;
  }
  return SPI_ERR_INTERNAL;
}

template <class F>
spi_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return SPI_OK;
  } catch (const spi::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const nlohmann::json::exception& e) {
    g_last_error = std::string("malformed JSON: ") + e.what();
    return SPI_ERR_INVALID_ARGUMENT;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return SPI_ERR_IO;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return SPI_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return SPI_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  spi::require(p != nullptr, spi::ErrorCode::invalid_argument, std::string(what) + " must not be null");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

double* dup_buffer(const std::vector<double>& v) {
  double* out = static_cast<double*>(std::malloc(std::max<std::size_t>(1, v.size()) * sizeof(double)));
  if (!out) throw std::bad_alloc();
  std::copy(v.begin(), v.end(), out);
  return out;
}

spi::Image wrap_image(const double* pixels, int height, int width, int channels) {
  need(pixels, "pixels");
  spi::require(height > 0 && width > 0 && (channels == 1 || channels == 3), spi::ErrorCode::invalid_argument,
               "image must be non-empty with 1 or 3 channels");
  spi::Image img(height, width, channels);
  std::copy(pixels, pixels + img.pixels.size(), img.pixels.begin());
  return img;
}

spi::MaskSet wrap_masks(const int8_t* masks, int count, int height, int width) {
  need(masks, "masks");
  spi::require(count > 0 && height > 0 && width > 0, spi::ErrorCode::invalid_argument, "empty mask set");
  spi::MaskSet m;
  m.count = count;
  m.height = height;
  m.width = width;
  m.entries.assign(masks, masks + static_cast<std::size_t>(count) * height * width);
  spi::validate_mask_set(m);
  return m;
}

spi::HadamardOrdering ordering_of(spi_ordering o) {
  spi::require(o == SPI_ORDER_NATURAL || o == SPI_ORDER_SEQUENCY, spi::ErrorCode::invalid_argument,
               "unknown Hadamard ordering");
  return o == SPI_ORDER_NATURAL ? spi::HadamardOrdering::natural : spi::HadamardOrdering::sequency;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  spi::require(static_cast<bool>(f), spi::ErrorCode::io, "cannot write " + path.string());
  f << text;
  spi::require(static_cast<bool>(f), spi::ErrorCode::io, "write failed: " + path.string());
}

void make_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  spi::require(!ec && std::filesystem::is_directory(dir), spi::ErrorCode::io,
               "cannot create directory " + dir.string());
}

}  // namespace

extern "C" {

const char* spi_last_error(void) { return g_last_error.c_str(); }
const char* spi_version(void) { return "1.0.0"; }
void spi_string_free(char* s) { std::free(s); }
void spi_buffer_free(double* p) { std::free(p); }

spi_status spi_sampling_count(double sr, int width, int height, int* out_count) {
  return guarded([&] {
    need(out_count, "out_count");
    *out_count = spi::sampling_count(sr, width, height);
  });
}

spi_status spi_forward_measure(const double* scene, int height, int width, const int8_t* masks, int count,
                               double noise_sigma, uint64_t noise_seed, double* out) {
  return guarded([&] {
    need(out, "out");
    const auto img = wrap_image(scene, height, width, 1);
    const auto m = wrap_masks(masks, count, height, width);
    const auto meas = spi::forward_measure(img, m, {noise_sigma, noise_seed});
    std::copy(meas.values.begin(), meas.values.end(), out);
  });
}

spi_status spi_hadamard_masks(int n, spi_ordering ordering, int8_t* out, int* mask_height, int* mask_width) {
  return guarded([&] {
    need(out, "out");
    const auto m = spi::walsh_hadamard_masks(n, n, ordering_of(ordering));
    std::copy(m.entries.begin(), m.entries.end(), out);
    if (mask_height) *mask_height = m.height;
    if (mask_width) *mask_width = m.width;
  });
}

spi_status spi_hadamard_reconstruct(const double* measurements, int n, spi_ordering ordering, double* out) {
  return guarded([&] {
    need(measurements, "measurements");
    need(out, "out");
    spi::require(n > 0, spi::ErrorCode::invalid_argument, "n must be positive");
    spi::MeasurementVector meas;
    meas.values.assign(measurements, measurements + n);
    const auto scene = spi::hadamard_reconstruct_full(meas, n, ordering_of(ordering));
    std::copy(scene.pixels.begin(), scene.pixels.end(), out);
  });
}

spi_status spi_classical_reconstruct(const double* measurements, const int8_t* masks, int count, int height,
                                     int width, double reg_weight, int max_iters, double tol, double* out,
                                     int* iterations) {
  return guarded([&] {
    need(measurements, "measurements");
    need(out, "out");
    const auto m = wrap_masks(masks, count, height, width);
    spi::MeasurementVector meas;
    meas.values.assign(measurements, measurements + count);
    spi::ClassicalOptions opt;
    opt.reg_weight = reg_weight;
    opt.max_iters = max_iters;
    opt.tol = tol;
    const auto res = spi::classical_reconstruct(m, meas, opt);
    std::copy(res.scene.pixels.begin(), res.scene.pixels.end(), out);
    if (iterations) *iterations = res.iterations;
  });
}

spi_status spi_psnr(const double* truth, const double* recon, int height, int width, int channels, double* out_db) {
  return guarded([&] {
    need(out_db, "out_db");
    *out_db = spi::psnr(wrap_image(truth, height, width, channels), wrap_image(recon, height, width, channels));
  });
}

spi_status spi_ssim(const double* truth, const double* recon, int height, int width, int channels, double* out) {
  return guarded([&] {
    need(out, "out");
    *out = spi::ssim(wrap_image(truth, height, width, channels), wrap_image(recon, height, width, channels));
  });
}

spi_status spi_config_create(spi_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new spi_config{};
  });
}

spi_status spi_config_load(const char* path, spi_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new spi_config{spi::load_config(path)};
  });
}

spi_status spi_config_set(spi_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    need(cfg, "cfg");
    need(key, "key");
    need(value, "value");
    spi::apply_override(cfg->cfg, key, value);
  });
}

spi_status spi_config_validate(const spi_config* cfg) {
  return guarded([&] {
    need(cfg, "cfg");
    spi::validate(cfg->cfg);
  });
}

spi_status spi_config_to_json(const spi_config* cfg, char** out_json) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out_json, "out_json");
    *out_json = dup_string(spi::config_to_json(cfg->cfg).dump(2) + "\n");
  });
}

void spi_config_free(spi_config* cfg) { delete cfg; }

spi_status spi_train(const spi_config* cfg, const char* out_dir, spi_epoch_callback on_epoch, void* user) {
  spi_status aborted = SPI_OK;
  const spi_status st = guarded([&] {
    need(cfg, "cfg");
    need(out_dir, "out_dir");
    const auto& c = cfg->cfg;
    spi::validate(c);
    const std::filesystem::path dir(out_dir);
    make_dir(dir);
    write_text(dir / "config.json", spi::config_to_json(c).dump(2) + "\n");

    const auto scenes = spi::load_dataset(c.data);
    const auto parts = spi::split(scenes, c.data.split_ratio, c.data.seed);
    spi::require(!parts.train.empty(), spi::ErrorCode::invalid_argument, "training split is empty");

    std::ofstream log(dir / "train_log.jsonl", std::ios::binary | std::ios::trunc);
    spi::require(static_cast<bool>(log), spi::ErrorCode::io, "cannot write train_log.jsonl");
    spi::Trainer trainer(c);
    const auto result = trainer.train(parts.train, parts.val, [&](const spi::EpochRecord& r) {
      log << r.to_json().dump() << '\n';
      log.flush();
      if (on_epoch) {
        const spi_epoch_info info{r.epoch, r.mse, r.vgg, r.adv, r.total, r.d_loss, r.val_psnr, r.d_updates};
        on_epoch(&info, user);
      }
    });

    result.last.save(dir / "checkpoint_last.spck");
    result.best.save(dir / "checkpoint_best.spck");
    const spi::Reconstructor last(result.last);
    spi::write_netpbm(dir / "mask_preview.pgm", spi::mask_preview(last.masks()));
    std::vector<std::vector<double>> curves(2);
    for (const auto& r : result.history) {
      curves[0].push_back(r.total);
      curves[1].push_back(r.val_psnr);
    }
    spi::write_netpbm(dir / "loss_curve.pgm", spi::plot_curves(curves));
    if (result.aborted) {
      g_last_error = "training aborted: " + result.abort_reason;
      aborted = SPI_ERR_NUMERICAL;
    }
  });
  return st == SPI_OK ? aborted : st;
}

spi_status spi_model_load(const char* checkpoint_path, spi_model** out) {
  return guarded([&] {
    need(checkpoint_path, "checkpoint_path");
    need(out, "out");
    *out = new spi_model{spi::Reconstructor(spi::Checkpoint::load(checkpoint_path))};
  });
}

void spi_model_free(spi_model* model) { delete model; }

spi_status spi_model_info(const spi_model* model, char** out_json) {
  return guarded([&] {
    need(model, "model");
    need(out_json, "out_json");
    const auto& r = model->rec;
    const nlohmann::json j = {{"sr", r.config().train.sr},
                              {"image_size", r.image_size()},
                              {"channels", r.channels()},
                              {"measurements", r.measurements()},
                              {"config_hash", spi::config_hash(r.config())},
                              {"config", spi::config_to_json(r.config())}};
    *out_json = dup_string(j.dump(2) + "\n");
  });
}

spi_status spi_model_measure(const spi_model* model, const double* scene, int height, int width, int channels,
                             double noise_sigma, uint64_t noise_seed, double** out_values, int* out_len) {
  return guarded([&] {
    need(model, "model");
    need(out_values, "out_values");
    need(out_len, "out_len");
    const auto meas = model->rec.measure(wrap_image(scene, height, width, channels), {noise_sigma, noise_seed});
    *out_values = dup_buffer(meas.values);
    *out_len = static_cast<int>(meas.values.size());
  });
}

spi_status spi_model_reconstruct(const spi_model* model, const double* values, int len, double** out_pixels,
                                 int* height, int* width, int* channels, double* latency_ms) {
  return guarded([&] {
    need(model, "model");
    need(values, "values");
    need(out_pixels, "out_pixels");
    spi::require(len > 0, spi::ErrorCode::invalid_argument, "empty measurement vector");
    spi::MeasurementVector meas;
    meas.values.assign(values, values + len);
    const auto rec = model->rec.reconstruct(meas);
    *out_pixels = dup_buffer(rec.scene.pixels);
    if (height) *height = rec.scene.height;
    if (width) *width = rec.scene.width;
    if (channels) *channels = rec.scene.channels;
    if (latency_ms) *latency_ms = rec.latency_ms;
  });
}

spi_status spi_model_evaluate_dir(const spi_model* model, const char* dir, double noise_sigma, uint64_t noise_seed,
                                  char** out_report, char** out_table, double* mean_latency_ms) {
  return guarded([&] {
    need(model, "model");
    need(dir, "dir");
    const auto& r = model->rec;
    spi::require(std::filesystem::is_directory(dir), spi::ErrorCode::io, std::string("not a directory: ") + dir);
    const auto images = spi::load_image_dir(dir, r.image_size(), r.channels() == 1);
    spi::require(!images.empty(), spi::ErrorCode::invalid_argument, std::string("no images found in ") + dir);
    const auto report =
        r.evaluate(images, {noise_sigma, noise_seed}, std::filesystem::path(dir).filename().string(), mean_latency_ms);
    if (out_report) *out_report = dup_string(report.to_json().dump(2) + "\n");
    if (out_table) *out_table = dup_string(report.table());
  });
}

spi_status spi_model_export_masks(const spi_model* model, const char* out_dir) {
  return guarded([&] {
    need(model, "model");
    need(out_dir, "out_dir");
    make_dir(out_dir);
    const auto& c = model->rec.config();
    spi::export_masks(model->rec.masks(), {c.train.sr, "learned", c.train.seed}, out_dir);
  });
}

spi_status spi_make_synthetic(int count, int size, uint64_t seed, int channels, const char* out_dir) {
  return guarded([&] {
    need(out_dir, "out_dir");
    spi::require(count > 0, spi::ErrorCode::invalid_argument, "count must be positive");
    spi::require(size >= 4, spi::ErrorCode::invalid_argument, "size must be at least 4");
    spi::require(channels == 1 || channels == 3, spi::ErrorCode::invalid_argument, "channels must be 1 or 3");
    make_dir(out_dir);
    spi::write_dataset(out_dir, spi::synth_shapes(count, size, seed, channels), size, seed);
  });
}

spi_status spi_image_read(const char* path, double** out_pixels, int* height, int* width, int* channels) {
  return guarded([&] {
    need(path, "path");
    need(out_pixels, "out_pixels");
    const auto img = spi::from_raster(spi::read_netpbm(path));
    *out_pixels = dup_buffer(img.pixels);
    if (height) *height = img.height;
    if (width) *width = img.width;
    if (channels) *channels = img.channels;
  });
}

spi_status spi_image_write(const char* path, const double* pixels, int height, int width, int channels) {
  return guarded([&] {
    need(path, "path");
    spi::write_netpbm(path, spi::to_raster(wrap_image(pixels, height, width, channels)));
  });
}

}  // extern "C"
