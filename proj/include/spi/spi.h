#ifndef SPI_SPI_H
#define SPI_SPI_H

/*
 * C interface to the single-pixel imaging library.
 *
 * Every call returns an spi_status. On failure a thread-local message is
 * available from spi_last_error() until the next call on the same thread.
 * Strings and buffers handed out by the library are released with
 * spi_string_free / spi_buffer_free. Images are channel-planar doubles in
 * [0,1], row-major within a plane.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define SPI_API __declspec(dllexport)
#else
#define SPI_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum spi_status {
  SPI_OK = 0,
  SPI_ERR_INVALID_ARGUMENT = 1,
  SPI_ERR_SHAPE = 2,
  SPI_ERR_IO = 3,
  SPI_ERR_NUMERICAL = 4,
  SPI_ERR_NOT_CONVERGED = 5,
  SPI_ERR_STATE = 6,
  SPI_ERR_INTERNAL = 99
} spi_status;

typedef enum spi_ordering { SPI_ORDER_NATURAL = 0, SPI_ORDER_SEQUENCY = 1 } spi_ordering;

SPI_API const char* spi_last_error(void);
SPI_API const char* spi_version(void);
SPI_API void spi_string_free(char* s);
SPI_API void spi_buffer_free(double* p);

/* ---- measurement physics and classical baselines ---- */

SPI_API spi_status spi_sampling_count(double sr, int width, int height, int* out_count);

/* masks: count x height x width entries in {-1,+1}; out: count values. */
SPI_API spi_status spi_forward_measure(const double* scene, int height, int width, const int8_t* masks, int count,
                                       double noise_sigma, uint64_t noise_seed, double* out);

/* n = number of pixels (power of two). out: n*n entries; each mask is
 * sqrt(n) x sqrt(n) for even powers of two, 1 x n otherwise. */
SPI_API spi_status spi_hadamard_masks(int n, spi_ordering ordering, int8_t* out, int* mask_height, int* mask_width);
SPI_API spi_status spi_hadamard_reconstruct(const double* measurements, int n, spi_ordering ordering, double* out);

SPI_API spi_status spi_classical_reconstruct(const double* measurements, const int8_t* masks, int count, int height,
                                             int width, double reg_weight, int max_iters, double tol, double* out,
                                             int* iterations);

SPI_API spi_status spi_psnr(const double* truth, const double* recon, int height, int width, int channels,
                            double* out_db);
SPI_API spi_status spi_ssim(const double* truth, const double* recon, int height, int width, int channels,
                            double* out);

/* ---- experiment configuration ---- */

typedef struct spi_config spi_config;

SPI_API spi_status spi_config_create(spi_config** out);
SPI_API spi_status spi_config_load(const char* path, spi_config** out);
/* value is parsed as JSON when possible, otherwise taken as a string. */
SPI_API spi_status spi_config_set(spi_config* cfg, const char* key, const char* value);
SPI_API spi_status spi_config_validate(const spi_config* cfg);
SPI_API spi_status spi_config_to_json(const spi_config* cfg, char** out_json);
SPI_API void spi_config_free(spi_config* cfg);

/* ---- training ---- */

typedef struct spi_epoch_info {
  int epoch;
  double mse;
  double vgg;
  double adv;
  double total;
  double d_loss;
  double val_psnr;
  long long d_updates;
} spi_epoch_info;

typedef void (*spi_epoch_callback)(const spi_epoch_info* info, void* user);

/* Writes config.json, train_log.jsonl, checkpoint_last.spck,
 * checkpoint_best.spck, mask_preview.pgm and loss_curve.pgm into out_dir
 * (created if missing). A non-finite loss stops training, keeps the last good
 * checkpoint and returns SPI_ERR_NUMERICAL. */
SPI_API spi_status spi_train(const spi_config* cfg, const char* out_dir, spi_epoch_callback on_epoch, void* user);

/* ---- trained models ---- */

typedef struct spi_model spi_model;

SPI_API spi_status spi_model_load(const char* checkpoint_path, spi_model** out);
SPI_API void spi_model_free(spi_model* model);
/* {"sr", "image_size", "channels", "measurements", "config_hash", "config"} */
SPI_API spi_status spi_model_info(const spi_model* model, char** out_json);
/* out_values receives channels * measurements values (R, G, B blocks). */
SPI_API spi_status spi_model_measure(const spi_model* model, const double* scene, int height, int width,
                                     int channels, double noise_sigma, uint64_t noise_seed, double** out_values,
                                     int* out_len);
SPI_API spi_status spi_model_reconstruct(const spi_model* model, const double* values, int len, double** out_pixels,
                                         int* height, int* width, int* channels, double* latency_ms);
/* Evaluates every .pgm/.ppm/.pnm in dir, resized to the model's size.
 * out_report: metrics JSON, out_table: text table; both optional. */
SPI_API spi_status spi_model_evaluate_dir(const spi_model* model, const char* dir, double noise_sigma,
                                          uint64_t noise_seed, char** out_report, char** out_table,
                                          double* mean_latency_ms);
SPI_API spi_status spi_model_export_masks(const spi_model* model, const char* out_dir);

/* ---- data ---- */

SPI_API spi_status spi_make_synthetic(int count, int size, uint64_t seed, int channels, const char* out_dir);
SPI_API spi_status spi_image_read(const char* path, double** out_pixels, int* height, int* width, int* channels);
/* 8-bit PGM (1 channel) or PPM (3 channels). */
SPI_API spi_status spi_image_write(const char* path, const double* pixels, int height, int width, int channels);

#ifdef __cplusplus
}
#endif

#endif
