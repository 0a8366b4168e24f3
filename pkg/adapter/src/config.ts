// Adapter configuration, read entirely from this process's environment.
// The API key is looked up indirectly (ADAPTER_API_KEY_ENV names the variable)
// and must never appear in protocol messages, transcripts, or logs.

export interface AdapterConfig {
  model: string;
  baseUrl: string;
  apiKey: string | undefined;
  temperature: number;
  cachePath: string | undefined;
  replayOnly: boolean;
  logPath: string | undefined;
}

export function loadConfig(env: NodeJS.ProcessEnv = process.env): AdapterConfig {
  const keyVar = env.ADAPTER_API_KEY_ENV ?? "OPENAI_API_KEY";
  return {
    model: env.ADAPTER_MODEL ?? "gpt-4o-mini",
    baseUrl: (env.ADAPTER_BASE_URL ?? "https://api.openai.com/v1").replace(/\/$/, ""),
    apiKey: env[keyVar],
    temperature: env.ADAPTER_TEMPERATURE !== undefined ? Number(env.ADAPTER_TEMPERATURE) : 0,
    cachePath: env.ADAPTER_CACHE,
    replayOnly: env.ADAPTER_REPLAY === "1",
    logPath: env.ADAPTER_LOG,
  };
}
